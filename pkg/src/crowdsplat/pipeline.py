"""In-memory pipeline stages shared by the CLI and the tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import optimize
from .config import PipelineConfig
from .errors import DegenerateMap
from .geom import SE3Pose, quat_multiply, quat_conjugate, quat_exp, quat_normalize
from .ginit import SplatSet, init_splats
from .illum import SHLight
from .mask import otsu_threshold, threshold_mask
from .matching import MatchSet, reciprocal_match
from .metrics import MetricReport
from .render import compose, render_reflectance, train
from .views import ViewGraph, ViewRecord

logger = logging.getLogger(__name__)


def match_views(views: list[ViewRecord], cfg: PipelineConfig) -> dict[tuple[int, int], MatchSet]:
    """Reciprocal matches for every unordered view pair, stored in both orders."""
    out = {}
    for i in range(len(views)):
        for j in range(i + 1, len(views)):
            a, b = views[i], views[j]
            ms = reciprocal_match(a.features, b.features, cfg.match_stride, a.valid, b.valid,
                                  a.confidence, b.confidence, max_distance=cfg.match_max_dist)
            out[(i, j)] = ms
            out[(j, i)] = ms.reversed()
    return out


def align_views(views: list[ViewRecord], cfg: PipelineConfig, trace_path: str | Path | None = None):
    graph, trace = optimize(ViewGraph(views, match_views(views, cfg)), cfg.align_config(), trace_path)
    return graph.views, trace


def confidence_masks(views: list[ViewRecord], cfg: PipelineConfig, disabled: bool = False) -> list[np.ndarray]:
    """Keep-masks from confidences; ``disabled`` keeps every pixel."""
    masks = []
    for v in views:
        if disabled:
            masks.append(np.ones(v.shape, dtype=bool))
            continue
        tau = cfg.threshold
        if cfg.otsu:
            try:
                tau = otsu_threshold(v.confidence[v.valid], cfg.otsu_bins)
            except DegenerateMap:
                # uniform confidence: nothing to separate, keep all valid pixels
                tau = 0.0
        masks.append(threshold_mask(v.confidence, tau) & v.valid)
    return masks


def init_stage(views: list[ViewRecord], masks: list[np.ndarray], cfg: PipelineConfig) -> SplatSet:
    seeded = [v.with_(mask=m) for v, m in zip(views, masks)]
    return init_splats(seeded, cfg.init_conf_threshold, cfg.init_stride)


def initial_lights(n_views: int, cfg: PipelineConfig, shared: bool = False) -> list[SHLight]:
    if shared:
        return [SHLight.neutral(0)]
    return [SHLight.neutral(cfg.sh_order) for _ in range(n_views)]


def train_stage(splats: SplatSet, views: list[ViewRecord], masks: list[np.ndarray], cfg: PipelineConfig,
                shared_light: bool = False, trace_path: str | Path | None = None):
    """Photometric refinement; returns splats and one light per view."""
    lights = initial_lights(len(views), cfg, shared_light)
    res = train(splats, views, lights, masks, cfg.render_config(), trace_path=trace_path)
    lights = res.lights * len(views) if shared_light else res.lights
    return res.splats, lights, res.trace


def render_views(splats: SplatSet, views: list[ViewRecord], lights: list[SHLight],
                 cfg: PipelineConfig) -> list[np.ndarray]:
    rc = cfg.render_config()
    return [np.clip(compose(render_reflectance(splats, v, rc), light, v).composed, 0.0, 1.0)
            for v, light in zip(views, lights)]


def evaluate(renders: list[np.ndarray], targets: list[np.ndarray], names: list[str]) -> MetricReport:
    return MetricReport.from_pairs({n: (r, t) for n, r, t in zip(names, renders, targets)})


def interpolate_pose(a: SE3Pose, b: SE3Pose, frac: float) -> SE3Pose:
    """Slerp rotations and lerp camera centers."""
    qa, qb = a.rotation, b.rotation
    if np.dot(qa, qb) < 0:
        qb = -qb
    rel = quat_multiply(qb, quat_conjugate(qa))
    angle = 2.0 * np.arctan2(np.linalg.norm(rel[1:]), rel[0])
    axis = rel[1:] / max(np.linalg.norm(rel[1:]), 1e-300)
    q = quat_normalize(quat_multiply(quat_exp(axis * angle * frac), qa))
    c = (1.0 - frac) * a.center + frac * b.center
    R = SE3Pose(q, np.zeros(3)).R
    return SE3Pose(q, -R @ c)


@dataclass
class AblationResult:
    full: MetricReport
    variants: dict[str, MetricReport]

    def to_dict(self) -> dict:
        out = {"full": {"psnr": self.full.psnr, "ssim": self.full.ssim}}
        for k, r in self.variants.items():
            out[k] = {"psnr": r.psnr, "ssim": r.ssim,
                      "delta_psnr": r.psnr - self.full.psnr, "delta_ssim": r.ssim - self.full.ssim}
        return out


VARIANTS = {"no_cm": (True, False), "no_ib": (False, True), "no_cm_ib": (True, True)}


def ablate(views: list[ViewRecord], targets: list[np.ndarray], cfg: PipelineConfig,
           variants: tuple[str, ...] = tuple(VARIANTS)) -> AblationResult:
    """Full pipeline against variants without confidence masks and/or per-view lights.

    Alignment does not depend on either switch, so it runs once and is shared.
    """
    aligned, _ = align_views(views, cfg)
    names = [v.name for v in aligned]

    def run(no_cm: bool, no_ib: bool) -> MetricReport:
        masks = confidence_masks(aligned, cfg, disabled=no_cm)
        splats = init_stage(aligned, masks, cfg)
        splats, lights, _ = train_stage(splats, aligned, masks, cfg, shared_light=no_ib)
        report = evaluate(render_views(splats, aligned, lights, cfg), targets, names)
        logger.info("ablation cm=%s ib=%s psnr=%.3f", not no_cm, not no_ib, report.psnr)
        return report

    full = run(False, False)
    return AblationResult(full, {k: run(*VARIANTS[k]) for k in variants})
