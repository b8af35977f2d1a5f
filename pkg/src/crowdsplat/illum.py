"""Per-view environment lighting as softplus-rectified real spherical harmonics."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange
from .optim import BacktrackingAdam

MAX_ORDER = 10


def n_coeffs(order: int) -> int:
    return (order + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# softplus(NEUTRAL_C00 * Y00) == 1
NEUTRAL_C00 = math.log(math.e - 1.0) * 2.0 * math.sqrt(math.pi)


@dataclass
class SHLight:
    """SH coefficients of shape ``((order + 1)**2, 3)``, flattened as ``l*l + l + m``."""

    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        if not 0 <= self.order <= MAX_ORDER:
            raise ValueError(f"SH order must be in [0, {MAX_ORDER}], got {self.order}")
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(n_coeffs(self.order), 3)
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("SH coefficients must be finite")

    @classmethod
    def zeros(cls, order: int = MAX_ORDER) -> "SHLight":
        return cls(order, np.zeros((n_coeffs(order), 3)))

    @classmethod
    def neutral(cls, order: int = MAX_ORDER) -> "SHLight":
        """Light evaluating to exactly 1 in every direction."""
        c = np.zeros((n_coeffs(order), 3))
        c[0] = NEUTRAL_C00
        return cls(order, c)

    def copy(self) -> "SHLight":
        return SHLight(self.order, self.coeffs.copy())

    def save(self, path: str | Path) -> None:
        lines = [f"sh_order {self.order}"]
        lines += [" ".join(repr(float(x)) for x in row) for row in self.coeffs]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SHLight":
        rows = Path(path).read_text().split("\n")
        order = int(rows[0].split()[1])
        data = [[float(x) for x in r.split()] for r in rows[1:] if r.strip()]
        return cls(order, np.array(data))


# --------------------------------------------------------------------------
# basis
# --------------------------------------------------------------------------

def _legendre_table(order: int, x: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Associated Legendre ``P_l^m(x)`` for ``0 <= m <= l <= order``, without
    the Condon-Shortley sign (upward recurrence in ``l``)."""
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    table = {}
    pmm = np.ones_like(x)
    for m in range(order + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * s
        table[(m, m)] = pmm
        if m + 1 <= order:
            table[(m + 1, m)] = x * (2 * m + 1) * pmm
        for l in range(m + 2, order + 1):
            table[(l, m)] = ((2 * l - 1) * x * table[(l - 1, m)] - (l + m - 1) * table[(l - 2, m)]) / (l - m)
    return table


def _norm(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def sh_basis_all(order: int, theta, phi) -> np.ndarray:
    """All real SH up to ``order`` at the given angles, shape ``(..., (order+1)**2)``."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    x = np.cos(theta)
    P = _legendre_table(order, x)
    out = np.empty(theta.shape + (n_coeffs(order),))
    for l in range(order + 1):
        out[..., sh_index(l, 0)] = _norm(l, 0) * P[(l, 0)]
        for m in range(1, l + 1):
            k = math.sqrt(2.0) * _norm(l, m) * P[(l, m)]
            out[..., sh_index(l, m)] = k * np.cos(m * phi)
            out[..., sh_index(l, -m)] = k * np.sin(m * phi)
    return out


def sh_basis(l: int, m: int, theta, phi):
    """Single real spherical harmonic ``Y_l^m``."""
    if not (0 <= l <= MAX_ORDER and -l <= m <= l):
        raise IndexOutOfRange(f"(l={l}, m={m}) outside 0 <= l <= {MAX_ORDER}, |m| <= l")
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    x = np.cos(theta)
    am = abs(m)
    P = _legendre_table(l, x)[(l, am)]
    if m == 0:
        return _norm(l, 0) * P
    k = math.sqrt(2.0) * _norm(l, am) * P
    return k * (np.cos(am * phi) if m > 0 else np.sin(am * phi))


def eval_illum(light: SHLight, theta, phi) -> np.ndarray:
    """Radiance per channel, shape ``(..., 3)``, strictly positive."""
    B = sh_basis_all(light.order, theta, phi)
    return softplus(B @ light.coeffs)


# --------------------------------------------------------------------------
# baking
# --------------------------------------------------------------------------

@dataclass
class BakedEnvMap:
    """Equirectangular radiance grid; row ``r`` sits at polar angle
    ``(r + 0.5) * pi / H`` and column ``c`` at azimuth ``(c + 0.5) * 2pi / W - pi``."""

    values: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def lookup(self, theta, phi) -> np.ndarray:
        """Bilinear lookup, wrapping in azimuth and clamping in polar angle."""
        h, w = self.resolution
        theta = np.asarray(theta, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        r = np.clip(theta / np.pi * h - 0.5, 0.0, h - 1)
        c = (phi + np.pi) / (2 * np.pi) * w - 0.5
        r0 = np.clip(np.floor(r).astype(int), 0, max(h - 2, 0))
        fr = (r - r0)[..., None]
        c0 = np.floor(c).astype(int)
        fc = (c - c0)[..., None]
        c0 %= w
        c1 = (c0 + 1) % w
        r1 = np.minimum(r0 + 1, h - 1)
        v = self.values
        top = v[r0, c0] * (1 - fc) + v[r0, c1] * fc
        bot = v[r1, c0] * (1 - fc) + v[r1, c1] * fc
        return top * (1 - fr) + bot * fr

    def save_raw(self, path: str | Path) -> None:
        """float32 little-endian RGB after an 8-byte ``<u32 H, u32 W>`` header."""
        h, w = self.resolution
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", h, w))
            fh.write(self.values.astype("<f4").tobytes())

    @classmethod
    def load_raw(cls, path: str | Path) -> "BakedEnvMap":
        data = Path(path).read_bytes()
        h, w = struct.unpack("<II", data[:8])
        return cls(np.frombuffer(data[8:], dtype="<f4").reshape(h, w, 3).astype(np.float64))

    def save_image(self, path: str | Path) -> None:
        from .fileio import write_image
        write_image(path, self.values)


def bake(light: SHLight, resolution: tuple[int, int] = (64, 128)) -> BakedEnvMap:
    h, w = resolution
    if h < 2 or w < 4:
        raise ValueError("bake resolution must be at least 2x4")
    theta = (np.arange(h) + 0.5) * np.pi / h
    phi = (np.arange(w) + 0.5) * 2 * np.pi / w - np.pi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    return BakedEnvMap(eval_illum(light, tt, pp))


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def illum_loss(coeffs: np.ndarray, basis: np.ndarray, targets: np.ndarray):
    """Mean squared radiance error and its gradient w.r.t. the coefficients."""
    a = basis @ coeffs
    r = softplus(a) - targets
    n = r.size
    val = float(np.sum(r * r) / n)
    g = basis.T @ (2.0 * r * sigmoid(a) / n)
    return val, g


def fit_coeffs(light: SHLight, targets, iters: int = 2000, step: float = 5e-2) -> tuple[SHLight, list[float]]:
    """Descend the squared error between the light and ``(theta, phi, rgb)`` targets.

    ``targets`` is a sequence of ``(theta, phi, radiance)`` or an ``(N, 5)``
    array. Returns the fitted light and the accepted-step loss trace.
    """
    t = np.asarray([[a, b, *np.broadcast_to(np.asarray(c, dtype=float), (3,))] for a, b, c in targets]) \
        if not isinstance(targets, np.ndarray) else np.asarray(targets, dtype=np.float64)
    if len(t) == 0:
        raise ValueError("fit_coeffs needs at least one target")
    basis = sh_basis_all(light.order, t[:, 0], t[:, 1])
    rad = t[:, 2:5]

    def objective(p):
        val, g = illum_loss(p["c"], basis, rad)
        return val, {"c": g}

    opt = BacktrackingAdam({"c": step})
    res = opt.run(objective, {"c": light.coeffs.copy()}, iters)
    return SHLight(light.order, res.params["c"]), res.losses
