import numpy as np
import pytest

from crowdsplat.errors import DivergedLoss
from crowdsplat.optim import BacktrackingAdam


def quad(p):
    x = p["x"]
    return float(np.sum((x - 3.0) ** 2)), {"x": 2 * (x - 3.0)}


def test_converges_and_trace_monotone():
    res = BacktrackingAdam({"x": 0.1}).run(quad, {"x": np.zeros(4)}, 500)
    assert np.allclose(res.params["x"], 3.0, atol=1e-3)
    assert all(b <= a for a, b in zip(res.losses, res.losses[1:]))


def test_zero_loss_returns_immediately():
    res = BacktrackingAdam({"x": 0.1}).run(quad, {"x": np.full(2, 3.0)}, 100)
    assert res.losses == [0.0] and res.accepted == 0


def test_non_finite_initial_loss():
    with pytest.raises(DivergedLoss):
        BacktrackingAdam({"x": 0.1}).run(lambda p: (np.nan, {"x": p["x"]}), {"x": np.zeros(1)}, 5)


def test_rejects_steps_that_increase_loss():
    # a huge rate overshoots; backtracking must keep the trace non-increasing
    res = BacktrackingAdam({"x": 100.0}).run(quad, {"x": np.zeros(3)}, 50)
    assert all(b <= a for a, b in zip(res.losses, res.losses[1:]))
    assert res.losses[-1] < res.losses[0]
