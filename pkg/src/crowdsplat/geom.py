"""Pinhole cameras, rigid transforms and direction parameterizations.

Conventions used throughout the package:

* Poses are world-to-camera: ``x_cam = R @ x_world + t``.
* Quaternions are stored ``(w, x, y, z)`` and kept at unit norm.
* Pixel coordinates are continuous ``(u, v) = (column, row)`` with pixel
  centers at integer coordinates; ``(0, 0)`` is the top-left pixel center.
* Camera frame: +x right, +y down, +z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth, ZeroVector

DEPTH_EPS = 1e-9


# --------------------------------------------------------------------------
# quaternion helpers (vectorized over leading axes)
# --------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Convert proper rotation matrices to unit quaternions with ``w >= 0``."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[k] = q / np.linalg.norm(q)
    return out.reshape(m.shape[:-2] + (4,))


def quat_exp(delta: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation vector ``delta`` (axis * angle)."""
    delta = np.asarray(delta, dtype=np.float64)
    angle = np.linalg.norm(delta, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with a series fallback near zero
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * delta], axis=-1)


def rotate_left(q: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Apply a left-multiplicative tangent increment: ``R <- Exp(delta) R``."""
    return quat_normalize(quat_multiply(quat_exp(delta), q))


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([
        np.stack([z, -w, y], -1),
        np.stack([w, z, -x], -1),
        np.stack([-y, x, z], -1),
    ], -2)


def rotation_angle(ra: np.ndarray, rb: np.ndarray) -> np.ndarray:
    """Geodesic angle in radians between rotation matrices."""
    rel = np.einsum("...ji,...jk->...ik", ra, rb)
    c = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


# --------------------------------------------------------------------------
# camera types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    """Zero-skew pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    @classmethod
    def from_array(cls, a, width: int, height: int) -> "Intrinsics":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), int(width), int(height))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SE3Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, r: np.ndarray, t: np.ndarray) -> "SE3Pose":
        return cls(matrix_to_quat(r), t)

    @classmethod
    def look_at(cls, center: np.ndarray, target=(0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0)) -> "SE3Pose":
        """Camera at ``center`` with +z toward ``target`` and image-up along ``up``."""
        center = np.asarray(center, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - center
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls.from_matrix(r, -r @ center)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.R.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m


def se3_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Return ``a ∘ b`` (apply ``b`` first)."""
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    t = a.R @ b.translation + a.translation
    return SE3Pose(q, t)


def se3_invert(p: SE3Pose) -> SE3Pose:
    q = quat_conjugate(p.rotation)
    return SE3Pose(q, -(quat_to_matrix(q) @ p.translation))


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def project(K: Intrinsics, P: SE3Pose, X) -> np.ndarray:
    """Project world point(s) ``X`` to continuous pixel coordinates.

    Raises:
        BehindCamera: if any point has camera depth ``<= 1e-9``.
    """
    xc = P.apply(X)
    z = xc[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise BehindCamera(f"camera-frame depth {np.min(z):.3g} is not positive")
    return np.stack([K.fx * xc[..., 0] / z + K.cx, K.fy * xc[..., 1] / z + K.cy], axis=-1)


def unproject(K: Intrinsics, u, depth) -> np.ndarray:
    """Camera-frame point at ``depth`` along the ray of pixel ``u``."""
    u = np.asarray(u, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth(f"depth must be positive, got {np.min(depth)}")
    x = (u[..., 0] - K.cx) / K.fx * depth
    y = (u[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def pixel_rays(K: Intrinsics) -> np.ndarray:
    """Unit camera-frame ray for every pixel center, shape (H, W, 3)."""
    vv, uu = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    d = unproject(K, np.stack([uu, vv], -1), 1.0)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def dir_to_spherical(d) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle from +z and azimuth from +x toward +y.

    Inputs that are not unit length are normalized. Works on arrays of
    directions with the vector on the last axis.
    """
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1)
    if np.any(n < 1e-12):
        raise ZeroVector("cannot take the direction of a zero vector")
    d = d / n[..., None]
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    return theta, phi


def spherical_to_dir(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
