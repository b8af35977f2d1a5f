"""First-order descent with per-parameter step scaling and backtracking.

Parameters and gradients are dicts of numpy arrays. The caller supplies a
``retract(params, steps)`` function so that manifold parameters (rotations)
can be updated multiplicatively; plain arrays simply use ``p - step``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergedLoss

Params = dict[str, np.ndarray]
Objective = Callable[[Params], tuple[float, Params]]


def additive_retract(params: Params, steps: Params) -> Params:
    out = dict(params)
    for k, s in steps.items():
        out[k] = params[k] - s
    return out


@dataclass
class DescentResult:
    params: Params
    losses: list[float] = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0


class BacktrackingAdam:
    """Adam direction with monotone acceptance.

    A trial step that does not decrease the objective (or yields a non-finite
    value) is rejected and the global step multiplier is halved; accepted
    steps grow it back toward 1. Only accepted losses enter the trace, so the
    trace is non-increasing by construction.

    ``final_lr`` sets a geometric learning-rate schedule: the rates shrink
    from their nominal values to ``final_lr`` times those at the last
    iteration.
    """

    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-12,
                 max_backtracks=6, grow=1.25, tol=0.0, patience=10, final_lr=1.0):
        if not final_lr > 0:
            raise ValueError("final_lr must be positive")
        self.final_lr = final_lr
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.max_backtracks = max_backtracks
        self.grow = grow
        self.tol = tol
        self.patience = patience

    def run(self, objective: Objective, params: Params, iters: int,
            retract: Callable[[Params, Params], Params] = additive_retract,
            callback: Callable[[int, float, Params], None] | None = None) -> DescentResult:
        loss, grads = objective(params)
        if not np.isfinite(loss):
            raise DivergedLoss(f"initial loss is not finite ({loss})")
        res = DescentResult(params=params, losses=[loss])
        if loss == 0.0:
            return res
        m = {k: np.zeros_like(g) for k, g in grads.items()}
        v = {k: np.zeros_like(g) for k, g in grads.items()}
        scale = 1.0
        quiet = 0
        decay = self.final_lr ** (1.0 / max(iters - 1, 1))
        for it in range(1, iters + 1):
            sched = decay ** (it - 1)
            for k, g in grads.items():
                m[k] = self.beta1 * m[k] + (1 - self.beta1) * g
                v[k] = self.beta2 * v[k] + (1 - self.beta2) * g * g
            c1 = 1 - self.beta1 ** it
            c2 = 1 - self.beta2 ** it
            direction = {
                k: (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps) for k in grads
            }
            for _ in range(self.max_backtracks + 1):
                steps = {k: scale * sched * self.lrs.get(k, 0.0) * d for k, d in direction.items()}
                trial = retract(params, steps)
                t_loss, t_grads = objective(trial)
                if np.isfinite(t_loss) and t_loss <= loss:
                    break
                scale *= 0.5
            else:
                res.rejected += 1
                continue
            rel = (loss - t_loss) / max(loss, 1e-300)
            params, loss, grads = trial, t_loss, t_grads
            res.accepted += 1
            res.losses.append(loss)
            scale = min(1.0, scale * self.grow)
            if callback is not None:
                callback(it, loss, params)
            if loss == 0.0:
                break
            quiet = quiet + 1 if rel < self.tol else 0
            if self.tol > 0 and quiet >= self.patience:
                break
        res.params = params
        return res
