"""Reciprocal (mutual nearest neighbour) matching of dense descriptor maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

_CHUNK_ELEMS = 4_000_000


@dataclass
class MatchSet:
    """Pixel correspondences between two views.

    ``pix_a`` and ``pix_b`` hold continuous ``(u, v)`` pixel coordinates,
    one row per pair; ``weights`` is the per-pair confidence.
    """

    pix_a: np.ndarray
    pix_b: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.pix_a = np.asarray(self.pix_a, dtype=np.float64).reshape(-1, 2)
        self.pix_b = np.asarray(self.pix_b, dtype=np.float64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(self.pix_a) == len(self.pix_b) == len(self.weights)):
            raise ValueError("match arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.weights)

    def reversed(self) -> "MatchSet":
        """Same correspondences seen from the other view, sorted by its pixels."""
        ra = np.rint(self.pix_b).astype(np.int64)
        order = np.lexsort((ra[:, 0], ra[:, 1]))
        return MatchSet(self.pix_b[order], self.pix_a[order], self.weights[order])

    def pairs(self) -> set[tuple[int, int, int, int]]:
        """Integer pixel pairs ``(ua, va, ub, vb)`` for set comparisons."""
        a = np.rint(self.pix_a).astype(int)
        b = np.rint(self.pix_b).astype(int)
        return {(int(p[0]), int(p[1]), int(q[0]), int(q[1])) for p, q in zip(a, b)}

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))


def stride_grid(shape: tuple[int, int], stride: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Row-major flat indices of sampled pixels (rows and columns multiple of stride)."""
    h, w = shape
    sel = np.zeros((h, w), dtype=bool)
    sel[::stride, ::stride] = True
    if valid is not None:
        sel &= valid
    return np.flatnonzero(sel)


def nearest_neighbors(queries: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Index of the squared-L2 nearest pool row for each query row.

    Distances are evaluated from explicit differences; ``argmin`` returns the
    first minimum so ties resolve to the lowest pool index.
    """
    n, d = queries.shape
    out = np.empty(n, dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(1, len(pool) * d))
    for s in range(0, n, step):
        diff = queries[s:s + step, None, :] - pool[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        out[s:s + step] = np.argmin(dist, axis=1)
    return out


def reciprocal_match(a: np.ndarray, b: np.ndarray, stride: int = 4,
                     valid_a: np.ndarray | None = None, valid_b: np.ndarray | None = None,
                     conf_a: np.ndarray | None = None, conf_b: np.ndarray | None = None,
                     max_distance: float | None = None) -> MatchSet:
    """Mutual nearest neighbours between two ``H×W×D`` descriptor maps.

    Only pixels on the stride grid (and inside the optional validity masks)
    take part, on both sides. A pair ``(ua, ub)`` is kept iff ``ub`` is the
    nearest sampled ``b`` pixel to ``a[ua]`` and ``ua`` is the nearest sampled
    ``a`` pixel to ``b[ub]``. Results are sorted row-major by ``ua``. Weights
    are ``min(conf_a[ua], conf_b[ub])`` when confidences are given, else 1.
    With ``max_distance`` set, mutual pairs whose descriptors are farther
    apart than that (L2) are dropped as well.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if b.ndim == 2:
        b = b[..., None]
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"descriptor lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ia = stride_grid(a.shape[:2], stride, valid_a)
    ib = stride_grid(b.shape[:2], stride, valid_b)
    if len(ia) == 0 or len(ib) == 0:
        return MatchSet.empty()
    da = a.reshape(-1, a.shape[-1])[ia]
    db = b.reshape(-1, b.shape[-1])[ib]
    ab = nearest_neighbors(da, db)
    ba = nearest_neighbors(db, da)
    keep = ba[ab] == np.arange(len(ia))
    if max_distance is not None:
        diff = da - db[ab]
        keep &= np.einsum("ij,ij->i", diff, diff) <= max_distance * max_distance
    fa = ia[keep]
    fb = ib[ab[keep]]
    wa, wb = a.shape[1], b.shape[1]
    pa = np.stack([fa % wa, fa // wa], -1).astype(np.float64)
    pb = np.stack([fb % wb, fb // wb], -1).astype(np.float64)
    if conf_a is not None and conf_b is not None:
        w = np.minimum(np.asarray(conf_a).reshape(-1)[fa], np.asarray(conf_b).reshape(-1)[fb])
    else:
        w = np.ones(len(fa))
    return MatchSet(pa, pb, w)
