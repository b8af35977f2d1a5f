"""PSNR and box-window SSIM on images in [0, 1]."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, ImageTooSmall

PSNR_CAP = 99.0
C1 = 0.01 ** 2
C2 = 0.03 ** 2
WINDOW = 8


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; identical images give the 99 dB cap."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _luma(x):
    return x.mean(axis=-1) if x.ndim == 3 else x


def ssim(a, b) -> float:
    """Mean SSIM over all 8x8 windows (stride 1) of the channel-mean luma.

    Window statistics are unweighted with population (1/N) variances.
    """
    a, b = _check(a, b)
    la, lb = _luma(a), _luma(b)
    if la.shape[0] < WINDOW or la.shape[1] < WINDOW:
        raise ImageTooSmall(f"SSIM needs at least {WINDOW}x{WINDOW} pixels, got {la.shape}")
    wa = sliding_window_view(la, (WINDOW, WINDOW))
    wb = sliding_window_view(lb, (WINDOW, WINDOW))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_view: dict[str, dict[str, float]] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: dict[str, tuple[np.ndarray, np.ndarray]]) -> "MetricReport":
        per = {name: {"psnr": psnr(a, b), "ssim": ssim(a, b)} for name, (a, b) in sorted(pairs.items())}
        return cls(
            psnr=float(np.mean([v["psnr"] for v in per.values()])),
            ssim=float(np.mean([v["ssim"] for v in per.values()])),
            per_view=per,
        )

    def to_text(self) -> str:
        lines = [f"psnr={self.psnr!r}", f"ssim={self.ssim!r}"]
        for name, v in self.per_view.items():
            lines.append(f"{name}.psnr={v['psnr']!r}")
            lines.append(f"{name}.ssim={v['ssim']!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "per_view": self.per_view}

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".txt").write_text(self.to_text())
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
