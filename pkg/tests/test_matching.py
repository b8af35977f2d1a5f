import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdsplat.errors import DimensionMismatch
from crowdsplat.matching import MatchSet, nearest_neighbors, reciprocal_match, stride_grid

from oracles import brute_mutual_nn


def test_single_pixel_self_match():
    a = np.ones((1, 1, 4))
    ms = reciprocal_match(a, a, stride=1)
    assert ms.pairs() == {(0, 0, 0, 0)}


def test_permuted_descriptors_recover_permutation():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2, 5))
    perm = [3, 0, 2, 1]
    b = a.reshape(4, 5)[perm].reshape(2, 2, 5)
    got = reciprocal_match(a, b, stride=1).pairs()
    want = {(k % 2, k // 2, perm.index(k) % 2, perm.index(k) // 2) for k in range(4)}
    assert got == want == brute_mutual_nn(a, b, 1)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        reciprocal_match(np.zeros((2, 2, 24)), np.zeros((2, 2, 16)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_mutuality_and_injectivity(seed, stride):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(7, 6, 3))
    b = rng.normal(size=(5, 8, 3))
    ab = reciprocal_match(a, b, stride)
    ba = reciprocal_match(b, a, stride)
    assert ab.pairs() == {(p[2], p[3], p[0], p[1]) for p in ba.pairs()}
    ra = {tuple(x) for x in np.rint(ab.pix_a).astype(int)}
    rb = {tuple(x) for x in np.rint(ab.pix_b).astype(int)}
    assert len(ra) == len(rb) == len(ab)
    assert all(x % stride == 0 for p in ab.pairs() for x in p)


def test_weights_are_min_confidence_and_sorted():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(6, 6, 4))
    ca, cb = rng.random((6, 6)), rng.random((6, 6))
    ms = reciprocal_match(a, a, 1, conf_a=ca, conf_b=cb)
    for (u, v), w in zip(np.rint(ms.pix_a).astype(int), ms.weights):
        assert w == min(ca[v, u], cb[v, u])
    keys = [(p[1], p[0]) for p in np.rint(ms.pix_a).astype(int)]
    assert keys == sorted(keys)


def test_max_distance_drops_far_pairs():
    a = np.array([[[0.0], [10.0]]])
    b = np.array([[[0.1], [8.0]]])
    assert len(reciprocal_match(a, b, 1)) == 2
    assert reciprocal_match(a, b, 1, max_distance=1.0).pairs() == {(0, 0, 0, 0)}


def test_reversed_swaps_sides():
    ms = MatchSet([[0, 0], [1, 2]], [[3, 1], [2, 0]], [0.5, 0.7])
    r = ms.reversed()
    assert r.pairs() == {(q[0], q[1], p[0], p[1]) for p, q in zip(ms.pix_a.astype(int), ms.pix_b.astype(int))}
    assert list(r.weights) == [0.7, 0.5]


def test_nearest_neighbors_ties_take_lowest_index():
    pool = np.array([[1.0], [0.0], [0.0]])
    assert list(nearest_neighbors(np.array([[0.0]]), pool)) == [1]


def test_stride_grid():
    assert list(stride_grid((3, 4), 2)) == [0, 2, 8, 10]
