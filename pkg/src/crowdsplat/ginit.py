"""Gaussian splat initialization from aligned point maps.

Each seed pixel gets the covariance of its 3x3 point-map neighbourhood.
The eigen-decomposition of that covariance gives the splat rotation and
standard deviations; the largest deviation is pulled down to the median so
that depth errors cannot blow splats up.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySplatSet, IoError, TooFewPoints
from .geom import matrix_to_quat, quat_normalize, quat_to_matrix
from .views import PointMap, ViewRecord

SCALE_FLOOR_FRAC = 1e-4


@dataclass(frozen=True)
class Splat:
    mean: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    weight: np.ndarray

    def covariance(self) -> np.ndarray:
        return self.rotation @ np.diag(self.scales ** 2) @ self.rotation.T


@dataclass
class SplatSet:
    """Struct-of-arrays splat collection; rotations stored as unit quaternions."""

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    weights: np.ndarray
    scene_scale: float = 1.0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.quats = quat_normalize(np.asarray(self.quats, dtype=np.float64).reshape(-1, 4))
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        if not (len(self.quats) == len(self.scales) == len(self.weights) == n):
            raise ValueError("splat arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, k: int) -> Splat:
        return Splat(self.means[k], quat_to_matrix(self.quats[k]), self.scales[k], self.weights[k])

    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.quats)

    def covariances(self) -> np.ndarray:
        R = self.rotations()
        return (R * (self.scales ** 2)[:, None, :]) @ R.transpose(0, 2, 1)

    def copy(self) -> "SplatSet":
        return SplatSet(self.means.copy(), self.quats.copy(), self.scales.copy(),
                        self.weights.copy(), self.scene_scale)

    @classmethod
    def empty(cls, scene_scale: float = 1.0) -> "SplatSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)), scene_scale)

    # -- PLY -----------------------------------------------------------------

    _PROPS = ("x", "y", "z", "qw", "qx", "qy", "qz", "scale_0", "scale_1", "scale_2",
              "w_0", "w_1", "w_2")

    def save_ply(self, path: str | Path) -> None:
        """Binary little-endian PLY, one ``vertex`` per splat, all properties double."""
        header = ["ply", "format binary_little_endian 1.0",
                  f"comment scene_scale {self.scene_scale!r}",
                  f"element vertex {len(self)}"]
        header += [f"property double {p}" for p in self._PROPS]
        header.append("end_header")
        body = np.concatenate([self.means, self.quats, self.scales, self.weights], axis=1)
        try:
            with open(path, "wb") as fh:
                fh.write(("\n".join(header) + "\n").encode("ascii"))
                fh.write(np.ascontiguousarray(body, dtype="<f8").tobytes())
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc.strerror}") from exc

    @classmethod
    def load_ply(cls, path: str | Path) -> "SplatSet":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc.strerror}") from exc
        end = raw.find(b"end_header\n")
        if not raw.startswith(b"ply\n") or end < 0:
            raise IoError(f"{path} is not a PLY file")
        lines = raw[:end].decode("ascii").splitlines()
        if "format binary_little_endian 1.0" not in lines:
            raise IoError(f"{path}: only binary little-endian PLY is supported")
        props = [ln.split()[-1] for ln in lines if ln.startswith("property")]
        if tuple(props) != cls._PROPS:
            raise IoError(f"{path}: unexpected splat properties {props}")
        count = next(int(ln.split()[-1]) for ln in lines if ln.startswith("element vertex"))
        scale = next((float(ln.split()[-1]) for ln in lines if ln.startswith("comment scene_scale")), 1.0)
        body = np.frombuffer(raw[end + len(b"end_header\n"):], dtype="<f8")
        if body.size != count * len(props):
            raise IoError(f"{path}: truncated splat payload")
        body = body.reshape(count, len(props)).astype(np.float64)
        return cls(body[:, 0:3], body[:, 3:7], body[:, 7:10], body[:, 10:13], scale)


# --------------------------------------------------------------------------
# covariance and clipping
# --------------------------------------------------------------------------

def neighborhood_cov(pm: PointMap, u) -> np.ndarray:
    """Population covariance of the valid points in the 3x3 window around
    pixel ``u = (col, row)``, clamped at the image border."""
    c, r = int(round(u[0])), int(round(u[1]))
    h, w = pm.valid.shape
    rs = slice(max(r - 1, 0), min(r + 2, h))
    cs = slice(max(c - 1, 0), min(c + 2, w))
    ok = pm.valid[rs, cs]
    pts = pm.points[rs, cs][ok]
    if len(pts) < 3:
        raise TooFewPoints(f"pixel {(c, r)} has {len(pts)} valid neighbours, need 3")
    d = pts - pts.mean(axis=0)
    return d.T @ d / len(pts)


def clip_scales(S, floor: float) -> np.ndarray:
    """Clamp deviations into ``[max(min(S), floor), median(S)]``, sorted descending.

    When the median falls below the lower bound the upper bound is raised to
    it, so every output is at least ``floor``.
    """
    S = np.asarray(S, dtype=np.float64)
    lo = np.maximum(S.min(axis=-1, keepdims=True), floor)
    hi = np.maximum(np.median(S, axis=-1, keepdims=True), lo)
    return -np.sort(-np.clip(S, lo, hi), axis=-1)


def eig_descending(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending, clamped at 0) and a proper rotation of eigenvectors.

    The first two eigenvectors have their first non-negligible component made
    positive; the third is their cross product so the matrix has det +1.
    """
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals[..., ::-1], 0.0)
    vecs = vecs[..., ::-1].copy()
    for k in (0, 1):
        col = vecs[..., :, k]
        first = np.argmax(np.abs(col) > 1e-12, axis=-1)
        sign = np.sign(np.take_along_axis(col, first[..., None], -1))
        sign[sign == 0] = 1.0
        vecs[..., :, k] = col * sign
    vecs[..., :, 2] = np.cross(vecs[..., :, 0], vecs[..., :, 1])
    return vals, vecs


def _window_covariances(points: np.ndarray, valid: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Vectorised :func:`neighborhood_cov` for many pixels; returns (cov, count)."""
    h, w = valid.shape
    acc = np.zeros((len(rows), 9, 3))
    ok = np.zeros((len(rows), 9), dtype=bool)
    k = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr, cc = rows + dr, cols + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rr_c, cc_c = np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)
            ok[:, k] = inside & valid[rr_c, cc_c]
            acc[:, k] = np.where(ok[:, k, None], points[rr_c, cc_c], 0.0)
            k += 1
    n = ok.sum(axis=1)
    mean = acc.sum(axis=1) / np.maximum(n, 1)[:, None]
    d = np.where(ok[..., None], acc - mean[:, None, :], 0.0)
    cov = np.einsum("nki,nkj->nij", d, d) / np.maximum(n, 1)[:, None, None]
    return cov, n


def init_splats(views: list[ViewRecord], conf_threshold: float = 0.0, stride: int = 2,
                floor_frac: float = SCALE_FLOOR_FRAC) -> SplatSet:
    """One splat per confident, unmasked, stride-sampled pixel of every view.

    Splats are ordered by source view, then row-major pixel. Weights start as
    the image color under the pixel.
    """
    means, rots, devs, cols_rgb = [], [], [], []
    for v in views:
        pts = v.points if v.points_opt is None else v.points_opt
        valid = v.valid & np.isfinite(pts).all(-1)
        keep = valid & (v.confidence >= conf_threshold)
        if v.mask is not None:
            keep &= v.mask
        grid = np.zeros_like(keep)
        grid[::stride, ::stride] = True
        rows, cols = np.nonzero(keep & grid)
        if len(rows) == 0:
            continue
        safe_pts = np.where(valid[..., None], pts, 0.0)
        cov, n = _window_covariances(safe_pts, valid, rows, cols)
        good = n >= 3
        rows, cols, cov = rows[good], cols[good], cov[good]
        vals, vecs = eig_descending(cov)
        R = v.pose.R if v.pose is not None else np.eye(3)
        t = v.pose.translation if v.pose is not None else np.zeros(3)
        means.append((safe_pts[rows, cols] - t) @ R)
        rots.append(np.einsum("ji,njk->nik", R, vecs))
        devs.append(np.sqrt(vals))
        cols_rgb.append(v.image[rows, cols])
    if not means or sum(len(m) for m in means) == 0:
        raise EmptySplatSet("no pixel passed the confidence/mask filter")
    means = np.concatenate(means)
    center = means.mean(axis=0)
    scene_scale = float(2.0 * np.max(np.linalg.norm(means - center, axis=1)))
    scene_scale = scene_scale if scene_scale > 0 else 1.0
    devs = clip_scales(np.concatenate(devs), floor_frac * scene_scale)
    return SplatSet(means, matrix_to_quat(np.concatenate(rots)), devs,
                    np.concatenate(cols_rgb), scene_scale)
