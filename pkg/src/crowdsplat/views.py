"""Per-view records passed between the pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .geom import Intrinsics, SE3Pose

if TYPE_CHECKING:
    from .illum import SHLight
    from .matching import MatchSet


@dataclass
class PointMap:
    """Per-pixel camera-frame points with a validity mask."""

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.shape[:2] != self.valid.shape or self.points.shape[-1] != 3:
            raise ValueError(f"point map {self.points.shape} does not match validity {self.valid.shape}")


@dataclass
class ViewRecord:
    """One input view plus whatever the stages have estimated for it so far.

    ``points`` is the initial point map (camera frame); ``points_opt`` the
    aligned one. ``K``/``pose`` hold the current estimates; the ``*_init``
    fields keep what the front end supplied, if anything.
    """

    image: np.ndarray
    points: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray
    features: np.ndarray
    name: str = ""
    K_init: Intrinsics | None = None
    pose_init: SE3Pose | None = None
    K: Intrinsics | None = None
    pose: SE3Pose | None = None
    points_opt: np.ndarray | None = None
    mask: np.ndarray | None = None
    light: "SHLight | None" = None

    def __post_init__(self):
        h, w = self.image.shape[:2]
        for label, arr, tail in (("points", self.points, (3,)), ("valid", self.valid, ()),
                                 ("confidence", self.confidence, ()), ("features", self.features, None)):
            if arr.shape[:2] != (h, w):
                raise ValueError(f"{label} has shape {arr.shape[:2]}, image is {(h, w)}")
            if tail is not None and arr.shape[2:] != tail:
                raise ValueError(f"{label} has trailing shape {arr.shape[2:]}, expected {tail}")
        if np.any(self.confidence < 0):
            raise ValueError("confidence values must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @property
    def point_map(self) -> PointMap:
        return PointMap(self.points if self.points_opt is None else self.points_opt, self.valid)

    def with_(self, **kw) -> "ViewRecord":
        return replace(self, **kw)


@dataclass
class ViewGraph:
    """Views and the match sets between ordered view pairs ``(i, j)``."""

    views: list[ViewRecord]
    matches: dict[tuple[int, int], "MatchSet"] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.views)
        for (i, j), ms in self.matches.items():
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"match key {(i, j)} is not a pair of distinct views")
            for pix, v in ((ms.pix_a, self.views[i]), (ms.pix_b, self.views[j])):
                r = np.rint(pix).astype(int)
                h, w = v.shape
                if len(r) and (r[:, 0].min() < 0 or r[:, 1].min() < 0 or r[:, 0].max() >= w or r[:, 1].max() >= h):
                    raise ValueError(f"match {(i, j)} references pixels outside the image")

    def is_connected(self, min_matches: int = 3) -> bool:
        n = len(self.views)
        adj = {k: set() for k in range(n)}
        for (i, j), ms in self.matches.items():
            if len(ms) >= min_matches:
                adj[i].add(j)
                adj[j].add(i)
        seen, stack = {0}, [0]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == n
