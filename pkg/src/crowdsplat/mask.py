"""Occlusion masks from confidence maps."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateMap


def threshold_mask(conf: np.ndarray, tau: float) -> np.ndarray:
    """``True`` (keep) where ``conf >= tau``."""
    return np.asarray(conf) >= tau


def histogram(conf: np.ndarray, bins: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Integer counts over ``[min, max]`` and the ``bins + 1`` bucket edges."""
    c = np.asarray(conf, dtype=np.float64).ravel()
    lo, hi = float(c.min()), float(c.max())
    if not hi > lo:
        raise DegenerateMap("confidence map is constant; no threshold separates it")
    counts, edges = np.histogram(c, bins=bins, range=(lo, hi))
    return counts.astype(np.int64), edges


def between_class_score(counts: np.ndarray, k: int) -> tuple[int, int]:
    """Between-class variance for the split below bucket ``k`` as an exact
    fraction ``(num, den)``, using bucket indices as class values.

    Bucket centers are an affine function of the index, so the maximizer is
    the same as with real-valued centers; integers keep comparisons exact.
    """
    idx = np.arange(len(counts), dtype=np.int64)
    n0 = int(counts[:k].sum())
    n1 = int(counts[k:].sum())
    if n0 == 0 or n1 == 0:
        return 0, 1
    m0 = int((counts[:k] * idx[:k]).sum())
    m1 = int((counts[k:] * idx[k:]).sum())
    diff = m1 * n0 - m0 * n1
    return diff * diff, n0 * n1


def otsu_threshold(conf: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold over a ``bins``-bucket histogram of the map's range.

    Returns the upper edge of the last bucket assigned to the low class, i.e.
    pixels with ``conf >= tau`` are kept. Ties go to the lower threshold.
    """
    counts, edges = histogram(conf, bins)
    idx = np.arange(bins, dtype=np.int64)
    c0 = np.cumsum(counts)
    s0 = np.cumsum(counts * idx)
    n, s = int(c0[-1]), int(s0[-1])
    best_k, best = None, (-1, 1)
    for k in range(1, bins):
        n0 = int(c0[k - 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        m0 = int(s0[k - 1])
        diff = (s - m0) * n0 - m0 * n1
        num, den = diff * diff, n0 * n1
        # num/den > best_num/best_den, cross-multiplied in exact integers
        if num * best[1] > best[0] * den:
            best_k, best = k, (num, den)
    if best_k is None:
        raise DegenerateMap("confidence histogram has a single occupied bucket")
    return float(edges[best_k])
