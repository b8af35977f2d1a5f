"""Synthetic scenes with exact ground truth, standing in for a learned stereo front end.

Geometry is a unit sphere sampled by a dense Fibonacci lattice of *anchor*
points. Each view z-buffers the anchors: an anchor claims the pixel its
projection rounds to and the nearest anchor wins. The point map stores the
claimed anchor itself, so two views that claim the same anchor hold the
exact same 3D point and the alignment losses vanish at ground truth.

Image content comes from ground-truth splats lying on the part of the sphere
facing the camera rig, rendered and lit by the regular renderer.
Descriptors are a random-feature embedding of the anchor position, so
nearby surface points have nearby descriptors and identical anchors have
identical ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Intrinsics, SE3Pose, matrix_to_quat, pixel_rays
from .ginit import SplatSet
from .illum import NEUTRAL_C00, SHLight, n_coeffs
from .matching import MatchSet
from .render import RenderConfig, compose, render_reflectance
from .views import ViewRecord

DESCRIPTOR_DIM = 24
CAMERA_RADIUS = 3.0
DIAMETER = 2.0
MAX_COMPOSED = 0.9


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2 ** 64 - 1), *tags]))


@dataclass
class NoiseModel:
    point_sigma: float = 0.0
    occluder_count: int = 0
    occluder_conf: tuple[float, float] = (0.01, 0.05)

    def __post_init__(self):
        if self.point_sigma < 0:
            raise ValueError("point_sigma must be non-negative")
        if self.occluder_count < 0:
            raise ValueError("occluder_count must be non-negative")

    def confidence(self, noise_norm: np.ndarray) -> np.ndarray:
        """``1 / (1 + |n| / sigma)`` with sigma in scene units; 1 without noise."""
        sigma = self.point_sigma * DIAMETER
        if sigma == 0:
            return np.ones_like(noise_norm)
        return 1.0 / (1.0 + noise_norm / sigma)


@dataclass
class Scene:
    splats: SplatSet
    poses: list[SE3Pose]
    intrinsics: list[Intrinsics]
    lights: list[SHLight]
    seed: int
    anchors: np.ndarray = field(repr=False)
    omega: np.ndarray = field(repr=False)
    phase: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.descriptors = self.describe(self.anchors)

    def describe(self, X: np.ndarray) -> np.ndarray:
        """Unit random-feature descriptor of world points."""
        d = np.cos(X @ self.omega + self.phase)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    @property
    def n_views(self) -> int:
        return len(self.poses)


@dataclass
class SynthData:
    views: list[ViewRecord]
    matches: dict[tuple[int, int], MatchSet]  # ground-truth correspondences on the stride grid
    clean: list[np.ndarray]                   # composed renders without occluders
    occluders: list[np.ndarray]               # painted footprints
    anchor_ids: list[np.ndarray]              # claimed anchor per pixel, -1 if none
    stride: int = 2


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], -1)


def _rig_direction(az, el):
    return np.stack([np.sin(az) * np.cos(el), -np.sin(el), np.cos(az) * np.cos(el)], -1)


def _random_light(rng, order: int) -> SHLight:
    c = np.zeros((n_coeffs(order), 3))
    c[0] = NEUTRAL_C00 + rng.uniform(-0.8, 0.8) + rng.normal(0, 0.15, 3)
    for l in range(1, order + 1):
        c[l * l:(l + 1) ** 2] = rng.normal(0, 0.5 / l, (2 * l + 1, 3))
    return SHLight(order, c)


def _tangent_frames(normals: np.ndarray, angle: np.ndarray) -> np.ndarray:
    helper = np.where(np.abs(normals[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, normals)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normals, t1)
    c, s = np.cos(angle)[:, None], np.sin(angle)[:, None]
    a = c * t1 + s * t2
    b = -s * t1 + c * t2
    return np.stack([a, b, normals], -1)


def gen_scene(seed: int, n_splats: int = 200, n_views: int = 4, width: int = 64, height: int = 48,
              focal: float = 130.0, sh_order: int = 4, n_anchors: int = 50_000,
              descriptor_scale: float = 0.2) -> Scene:
    """Random splats on the rig-facing cap of the unit sphere, cameras at radius 3."""
    if n_splats < 1:
        raise ValueError("n_splats must be >= 1")
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    if not 0 <= sh_order <= 4:
        raise ValueError("synthetic lights use SH order <= 4")
    rng = _rng(seed, 0)
    az = np.deg2rad(np.linspace(-25.0, 25.0, n_views) + rng.uniform(-3, 3, n_views))
    el = np.deg2rad(rng.uniform(-10.0, 15.0, n_views))
    centers = CAMERA_RADIUS * _rig_direction(az, el)
    poses = [SE3Pose.look_at(c) for c in centers]
    K = Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    # splat means on the cap within 50 degrees of the rig axis
    axis = _rig_direction(0.0, np.deg2rad(2.5))
    cos_max = np.cos(np.deg2rad(50.0))
    pts = []
    while sum(len(p) for p in pts) < n_splats:
        d = rng.normal(size=(4 * n_splats, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts.append(d[d @ axis >= cos_max])
    means = np.concatenate(pts)[:n_splats]
    frames = _tangent_frames(means, rng.uniform(0, np.pi, n_splats))
    scales = np.stack([rng.uniform(0.08, 0.25, n_splats), rng.uniform(0.08, 0.25, n_splats),
                       rng.uniform(0.01, 0.03, n_splats)], -1)
    colors = rng.uniform(0.1, 1.0, (n_splats, 3))
    splats = SplatSet(means, matrix_to_quat(frames), scales, colors, DIAMETER)
    lights = [_random_light(rng, sh_order) for _ in range(n_views)]

    anchors = fibonacci_sphere(n_anchors)
    omega = rng.normal(0.0, 1.0 / descriptor_scale, (3, DESCRIPTOR_DIM))
    phase = rng.uniform(0, 2 * np.pi, DESCRIPTOR_DIM)
    scene = Scene(splats, poses, [K] * n_views, lights, seed, anchors, omega, phase)
    _normalize_brightness(scene)
    return scene


def _zbuffer(scene: Scene, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Claimed anchor id per pixel (-1 when empty) and the anchors' camera points."""
    K, P = scene.intrinsics[k], scene.poses[k]
    xc = P.apply(scene.anchors)
    facing = np.einsum("ij,ij->i", scene.anchors, scene.anchors - P.center) < 0
    ids = np.flatnonzero(facing & (xc[:, 2] > 1e-6))
    x = xc[ids]
    u = np.rint(K.fx * x[:, 0] / x[:, 2] + K.cx).astype(np.int64)
    v = np.rint(K.fy * x[:, 1] / x[:, 2] + K.cy).astype(np.int64)
    inside = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    ids, x, u, v = ids[inside], x[inside], u[inside], v[inside]
    flat = v * K.width + u
    order = np.lexsort((ids, x[:, 2], flat))
    flat, ids = flat[order], ids[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    claim = np.full(K.width * K.height, -1, dtype=np.int64)
    claim[flat[first]] = ids[first]
    return claim.reshape(K.height, K.width), xc


def _sphere_hits(K: Intrinsics, P: SE3Pose) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame first intersection of every pixel ray with the unit sphere."""
    rays = pixel_rays(K)
    d = rays @ P.R                      # world directions (unnormalized)
    c = P.center
    a = np.einsum("hwi,hwi->hw", d, d)
    b = 2.0 * d @ c
    disc = b * b - 4.0 * a * (c @ c - 1.0)
    hit = disc > 0
    s = (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2.0 * a)
    hit &= s > 0
    return rays * s[..., None], hit


def _clean_view(scene: Scene, k: int) -> tuple[ViewRecord, np.ndarray]:
    K, P = scene.intrinsics[k], scene.poses[k]
    claim, xc = _zbuffer(scene, k)
    pts, valid = _sphere_hits(K, P)
    claimed = claim >= 0
    pts[claimed] = xc[claim[claimed]]
    valid |= claimed
    feats = np.zeros((K.height, K.width, DESCRIPTOR_DIM))
    feats[claimed] = scene.descriptors[claim[claimed]]
    fill = valid & ~claimed
    feats[fill] = scene.describe((pts[fill] - P.translation) @ P.R)
    pts[~valid] = 0.0
    blank = np.zeros((K.height, K.width, 3))
    v = ViewRecord(blank, pts, valid, valid.astype(np.float64), feats, name=f"view_{k:03d}", K=K, pose=P)
    return v, claim


def _render_clean(scene: Scene, view: ViewRecord, k: int) -> np.ndarray:
    refl = render_reflectance(scene.splats, view, RenderConfig())
    return compose(refl, scene.lights[k], view).composed


def _normalize_brightness(scene: Scene) -> None:
    peak = 0.0
    for k in range(scene.n_views):
        v, _ = _clean_view(scene, k)
        peak = max(peak, float(_render_clean(scene, v, k).max()))
    if peak > 0:
        scene.splats.weights *= MAX_COMPOSED / peak


def _paint_occluders(rng, shape, count) -> np.ndarray:
    h, w = shape
    vv, uu = np.mgrid[0:h, 0:w]
    fp = np.zeros((h, w), dtype=bool)
    for _ in range(count):
        cu, cv = rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h)
        ru, rv = rng.uniform(0.08, 0.16) * w, rng.uniform(0.08, 0.16) * h
        ang = rng.uniform(0, np.pi)
        du, dv = uu - cu, vv - cv
        a = (np.cos(ang) * du + np.sin(ang) * dv) / ru
        b = (-np.sin(ang) * du + np.cos(ang) * dv) / rv
        fp |= a * a + b * b <= 1.0
    return fp


def gen_views(scene: Scene, noise: NoiseModel | None = None, stride: int = 2) -> SynthData:
    """Images, noisy point maps, confidences, descriptors and ground-truth matches."""
    noise = noise or NoiseModel()
    views, claims, clean, occl = [], [], [], []
    for k in range(scene.n_views):
        base, claim = _clean_view(scene, k)
        img = _render_clean(scene, base, k)
        clean.append(img)
        rng = _rng(scene.seed, 1, k)
        sigma = noise.point_sigma * DIAMETER
        n = rng.normal(0.0, 1.0, base.points.shape) * sigma
        valid = base.valid.copy()
        pts = np.where(valid[..., None], base.points + n, 0.0)
        conf = np.where(valid, noise.confidence(np.linalg.norm(n, axis=-1)), 0.0)
        feats = base.features.copy()
        image = img.copy()
        fp = _paint_occluders(rng, base.shape, noise.occluder_count)
        if fp.any():
            m = int(fp.sum())
            image[fp] = rng.uniform(0.0, 1.0, 3)
            conf[fp] = rng.uniform(*noise.occluder_conf, m)
            f = rng.normal(size=(m, DESCRIPTOR_DIM))
            feats[fp] = f / np.linalg.norm(f, axis=1, keepdims=True)
            # occluders float in front of the surface along the same rays
            depth_scale = rng.uniform(0.4, 0.7)
            ray_pts = np.where(valid[..., None], base.points, pixel_rays(base.K))
            pts[fp] = ray_pts[fp] * depth_scale * np.where(valid[fp], 1.0, 2.0)[:, None]
            valid = valid | fp
            claim = np.where(fp, -1, claim)
        views.append(ViewRecord(image, pts, valid, conf, feats, name=base.name))
        claims.append(claim)
        occl.append(fp)
    matches = _gt_matches(scene, views, claims, stride)
    return SynthData(views, matches, clean, occl, claims, stride)


def _gt_matches(scene: Scene, views, claims, stride: int) -> dict[tuple[int, int], MatchSet]:
    """Pairs of stride-grid pixels that claim the same anchor, both orderings.

    Pixel coordinates are the continuous projections of the shared anchor,
    so reprojection residuals vanish at ground truth while ``rint`` recovers
    the grid pixels.
    """
    grid = []
    for c in claims:
        g = np.full_like(c, -1)
        g[::stride, ::stride] = c[::stride, ::stride]
        grid.append(g)
    out = {}
    n = len(views)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            gi, gj = grid[i], grid[j]
            ids_i = gi[gi >= 0]
            ids_j = gj[gj >= 0]
            common = np.intersect1d(ids_i, ids_j)
            if len(common) == 0:
                out[(i, j)] = MatchSet.empty()
                continue
            ri, ci = np.nonzero(np.isin(gi, common))   # row-major in view i
            aid = gi[ri, ci]
            X = scene.anchors[aid]
            pa = _project(scene, i, X)
            pb = _project(scene, j, X)
            pos_j = {int(a): (r, c) for r, c, a in zip(*np.nonzero(gj >= 0), gj[gj >= 0])}
            rb = np.array([pos_j[int(a)] for a in aid])
            w = np.minimum(views[i].confidence[ri, ci], views[j].confidence[rb[:, 0], rb[:, 1]])
            out[(i, j)] = MatchSet(pa, pb, w)
    return out


def _project(scene: Scene, k: int, X: np.ndarray) -> np.ndarray:
    K, P = scene.intrinsics[k], scene.poses[k]
    x = P.apply(X)
    return np.stack([K.fx * x[:, 0] / x[:, 2] + K.cx, K.fy * x[:, 1] / x[:, 2] + K.cy], -1)


def with_ground_truth(data: SynthData, scene: Scene) -> list[ViewRecord]:
    """Views carrying the true intrinsics, poses and lights (for fixed-point checks)."""
    return [v.with_(K=scene.intrinsics[k], pose=scene.poses[k], light=scene.lights[k])
            for k, v in enumerate(data.views)]
