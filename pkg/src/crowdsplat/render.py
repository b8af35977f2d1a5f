"""Additive Gaussian splat rendering, Retinex composition and photometric refinement.

The reflectance image of a view is a plain weighted sum of unnormalized 2D
Gaussians (no alpha, no depth order). Each view's image is modelled as
``L * R`` where ``L`` is that view's SH illumination evaluated along the
per-pixel camera-frame direction.

Rasterization works on *fragments*: every (pixel, splat) pair that falls
inside the cutoff ellipse. Fragments are emitted in a fixed order (bucket of
box size, splat index, row-major pixel) and reduced with ``np.bincount``,
which sums sequentially, so renders are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergedLoss
from .geom import Intrinsics, SE3Pose, dir_to_spherical, matrix_to_quat, pixel_rays, rotate_left
from .ginit import Splat, SplatSet
from .illum import SHLight, n_coeffs, sh_basis_all, sigmoid, softplus
from .optim import BacktrackingAdam, Params
from .views import ViewRecord

NEAR = 1e-4
EIG_FLOOR = 0.3


@dataclass
class RenderConfig:
    cutoff_sigmas: float = 3.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    train_iters: int = 1000
    lr_weight: float = 1e-2
    lr_mean: float = 1e-4       # multiplied by the scene scale
    lr_scale: float = 1e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 1e-2

    def __post_init__(self):
        if not self.cutoff_sigmas > 0:
            raise ValueError(f"cutoff_sigmas must be positive, got {self.cutoff_sigmas}")
        if self.train_iters < 0:
            raise ValueError("train_iters must be non-negative")
        self.background = tuple(float(b) for b in self.background)
        if len(self.background) != 3:
            raise ValueError("background must have 3 channels")


@dataclass
class RenderedView:
    reflectance: np.ndarray
    illumination: np.ndarray
    composed: np.ndarray


class _CulledType:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "Culled"

    def __bool__(self):
        return False


Culled = _CulledType()


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def _sym2_eig(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenpairs of symmetric 2x2 matrices, eigenvalues ascending."""
    a, b, c = A[:, 0, 0], A[:, 0, 1], A[:, 1, 1]
    mid = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    th = 0.5 * np.arctan2(2.0 * b, a - c)
    cs, sn = np.cos(th), np.sin(th)
    Q = np.empty_like(A)
    Q[:, 0, 0], Q[:, 1, 0] = -sn, cs      # eigenvector of mid - rad
    Q[:, 0, 1], Q[:, 1, 1] = cs, sn       # eigenvector of mid + rad
    return np.stack([mid - rad, mid + rad], -1), Q


def _from_eig(Q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    return (Q * lam[:, None, :]) @ Q.transpose(0, 2, 1)


def _floor_eig(A: np.ndarray):
    lam, Q = _sym2_eig(A)
    lf = np.maximum(lam, EIG_FLOOR)
    return _from_eig(Q, lf), lam, Q, _from_eig(Q, 1.0 / lf)


@dataclass
class Projection:
    """Per-splat projection into one view (only splats in front of the camera)."""

    idx: np.ndarray        # splat indices kept
    m: np.ndarray          # camera-frame means
    mu2d: np.ndarray
    J: np.ndarray          # 2x3 projection Jacobians
    sigma_cam: np.ndarray  # camera-frame 3D covariances
    lam: np.ndarray        # eigenvalues of J Sigma J^T before the floor
    Q: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray


def project_splats(splats: SplatSet, K: Intrinsics, P: SE3Pose,
                   sig3: np.ndarray | None = None) -> Projection:
    W = P.R
    m_all = splats.means @ W.T + P.translation
    idx = np.flatnonzero(m_all[:, 2] > NEAR)
    m = m_all[idx]
    z = m[:, 2]
    mu2d = np.stack([K.fx * m[:, 0] / z + K.cx, K.fy * m[:, 1] / z + K.cy], -1)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * m[:, 0] / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * m[:, 1] / z ** 2
    sig3 = (splats.covariances() if sig3 is None else sig3)[idx]
    sig_c = W @ sig3 @ W.T
    A = J @ sig_c @ J.transpose(0, 2, 1)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    cov, lam, Q, conic = _floor_eig(A)
    return Projection(idx, m, mu2d, J, sig_c, lam, Q, cov, conic)


def project_splat(s: Splat, K: Intrinsics, P: SE3Pose):
    """``(mu2d, cov2d)`` for a single splat, or ``Culled`` if it is behind the near plane."""
    one = SplatSet(s.mean[None], matrix_to_quat(np.asarray(s.rotation, dtype=np.float64))[None],
                   s.scales[None], s.weight[None])
    pr = project_splats(one, K, P)
    if len(pr.idx) == 0:
        return Culled
    return pr.mu2d[0], pr.cov2d[0]


# --------------------------------------------------------------------------
# rasterization
# --------------------------------------------------------------------------

@dataclass
class Fragments:
    pix: np.ndarray   # flat pixel index
    spl: np.ndarray   # index into Projection arrays
    g: np.ndarray     # Gaussian value
    dx: np.ndarray
    dy: np.ndarray


def rasterize(pr: Projection, shape: tuple[int, int], cutoff: float) -> Fragments:
    h, w = shape
    c2 = cutoff * cutoff
    rx = cutoff * np.sqrt(pr.cov2d[:, 0, 0])
    ry = cutoff * np.sqrt(pr.cov2d[:, 1, 1])
    x0 = np.maximum(np.ceil(pr.mu2d[:, 0] - rx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(pr.mu2d[:, 0] + rx), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(pr.mu2d[:, 1] - ry), 0).astype(np.int64)
    y1 = np.minimum(np.floor(pr.mu2d[:, 1] + ry), h - 1).astype(np.int64)
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    live = np.flatnonzero((bw > 0) & (bh > 0))
    out = {k: [] for k in ("pix", "spl", "g", "dx", "dy")}
    if len(live):
        key = bh[live] * (w + 1) + bw[live]
        order = live[np.argsort(key, kind="stable")]
        keys = bh[order] * (w + 1) + bw[order]
        cuts = np.flatnonzero(np.diff(keys)) + 1
        for grp in np.split(order, cuts):
            gh, gw = int(bh[grp[0]]), int(bw[grp[0]])
            ys = y0[grp, None, None] + np.arange(gh)[None, :, None]
            xs = x0[grp, None, None] + np.arange(gw)[None, None, :]
            shp = (len(grp), gh, gw)
            dx = np.broadcast_to(xs - pr.mu2d[grp, 0, None, None], shp)
            dy = np.broadcast_to(ys - pr.mu2d[grp, 1, None, None], shp)
            a = pr.conic[grp, 0, 0, None, None]
            b = pr.conic[grp, 0, 1, None, None]
            c = pr.conic[grp, 1, 1, None, None]
            q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
            keep = q <= c2
            sel = np.broadcast_to(grp[:, None, None], keep.shape)[keep]
            out["pix"].append((ys * w + xs)[keep])
            out["spl"].append(sel)
            out["g"].append(np.exp(-0.5 * q[keep]))
            out["dx"].append(dx[keep])
            out["dy"].append(dy[keep])
    cat = {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in out.items()}
    return Fragments(cat["pix"].astype(np.int64), cat["spl"].astype(np.int64),
                     cat["g"], cat["dx"], cat["dy"])


def _accumulate(fr: Fragments, weights: np.ndarray, n_pix: int) -> np.ndarray:
    out = np.empty((n_pix, 3))
    for ch in range(3):
        out[:, ch] = np.bincount(fr.pix, weights=fr.g * weights[fr.spl, ch], minlength=n_pix)
    return out


def render_reflectance(splats: SplatSet, view: ViewRecord, cfg: RenderConfig | None = None,
                       K: Intrinsics | None = None, pose: SE3Pose | None = None,
                       shape: tuple[int, int] | None = None) -> np.ndarray:
    """``R(u) = background + sum_j w_j G_j(u)`` as an ``H x W x 3`` array.

    ``K``/``pose``/``shape`` override the view's own camera (novel views).
    """
    cfg = cfg or RenderConfig()
    K = K or view.K
    pose = pose or view.pose
    h, w = shape or view.shape
    bg = np.asarray(cfg.background)
    if len(splats) == 0:
        return np.broadcast_to(bg, (h, w, 3)).copy()
    pr = project_splats(splats, K, pose)
    fr = rasterize(pr, (h, w), cfg.cutoff_sigmas)
    img = _accumulate(fr, splats.weights[pr.idx], h * w) + bg
    return img.reshape(h, w, 3)


# --------------------------------------------------------------------------
# illumination
# --------------------------------------------------------------------------

def view_directions(K: Intrinsics, points: np.ndarray | None = None,
                    valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ``(theta, phi)`` of the camera-frame direction to the pixel's point.

    Pixels without a valid point (or when no point map is given) fall back to
    the pixel ray at depth 1.
    """
    rays = pixel_rays(K)
    if points is not None:
        ok = valid & np.isfinite(points).all(-1) & (np.linalg.norm(np.nan_to_num(points), axis=-1) > 1e-12)
        rays = np.where(ok[..., None], np.nan_to_num(points), rays)
    return dir_to_spherical(rays)


def illum_basis(view: ViewRecord, order: int, K: Intrinsics | None = None) -> np.ndarray:
    K = K or view.K
    pts = view.points if view.points_opt is None else view.points_opt
    theta, phi = view_directions(K, pts, view.valid)
    return sh_basis_all(order, theta, phi).reshape(-1, n_coeffs(order))


def compose(reflectance: np.ndarray, light: SHLight, view: ViewRecord | None = None,
            K: Intrinsics | None = None, basis: np.ndarray | None = None) -> RenderedView:
    """Multiply the reflectance by the view's illumination field."""
    h, w = reflectance.shape[:2]
    if basis is None:
        if view is not None:
            basis = illum_basis(view, light.order, K)
        else:
            basis = sh_basis_all(light.order, *view_directions(K)).reshape(-1, n_coeffs(light.order))
    illum = softplus(basis @ light.coeffs).reshape(h, w, 3)
    return RenderedView(reflectance, illum, reflectance * illum)


# --------------------------------------------------------------------------
# photometric loss
# --------------------------------------------------------------------------

@dataclass
class _ViewData:
    K: Intrinsics
    pose: SE3Pose
    shape: tuple[int, int]
    target: np.ndarray      # (HW, 3)
    mask: np.ndarray        # (HW, 1) float
    basis: np.ndarray       # (HW, nc)


def _eig_floor_backward(lam, Q, g_cov):
    lf = np.maximum(lam, EIG_FLOOR)
    df = (lam > EIG_FLOOR).astype(np.float64)
    l0, l1 = lam[:, :1], lam[:, 1:]
    diff = l0 - l1
    close = np.abs(diff) < 1e-12
    off = np.where(close, 0.5 * (df[:, :1] + df[:, 1:]),
                   (lf[:, :1] - lf[:, 1:]) / np.where(close, 1.0, diff))
    gamma = np.empty((len(lam), 2, 2))
    gamma[:, 0, 0] = df[:, 0]
    gamma[:, 1, 1] = df[:, 1]
    gamma[:, 0, 1] = gamma[:, 1, 0] = off[:, 0]
    inner = Q.transpose(0, 2, 1) @ g_cov @ Q
    return Q @ (gamma * inner) @ Q.transpose(0, 2, 1)


class PhotometricProblem:
    """Masked MSE between composed renders and target images, with gradients.

    Parameters: ``w`` (N,3) weights, ``mu`` (N,3) means, ``s`` (N,3) scales,
    ``q`` (N,4) quaternions whose gradient is a left tangent (N,3), and ``c``
    (V or 1, nc, 3) SH coefficients. With ``shared_light`` one light is used
    for every view.
    """

    def __init__(self, views: list[ViewRecord], masks: list[np.ndarray], order: int,
                 cfg: RenderConfig | None = None, shared_light: bool = False):
        self.cfg = cfg or RenderConfig()
        self.order = order
        self.shared = shared_light
        self.data = []
        for v, m in zip(views, masks):
            h, w = v.shape
            self.data.append(_ViewData(v.K, v.pose, (h, w), v.image.reshape(-1, 3).astype(np.float64),
                                       np.asarray(m, dtype=np.float64).reshape(-1, 1),
                                       illum_basis(v, order)))
        self.denom = 3.0 * sum(float(d.mask.sum()) for d in self.data)
        if self.denom == 0:
            raise ValueError("every pixel is masked out; nothing to fit")

    def params(self, splats: SplatSet, lights: list[SHLight]) -> Params:
        c = np.stack([l.coeffs for l in lights])
        return {"w": splats.weights.copy(), "mu": splats.means.copy(), "s": splats.scales.copy(),
                "q": splats.quats.copy(), "c": c.copy()}

    def loss(self, p: Params, grad: bool = True):
        spl = SplatSet(p["mu"], p["q"], p["s"], p["w"])
        n = len(spl)
        sig3 = spl.covariances()
        Rs = spl.rotations()
        total = 0.0
        g = {"w": np.zeros((n, 3)), "mu": np.zeros((n, 3)), "s": np.zeros((n, 3)),
             "q": np.zeros((n, 3)), "c": np.zeros_like(p["c"])}
        g_sig3 = np.zeros((n, 3, 3))
        bg = np.asarray(self.cfg.background)
        for vi, d in enumerate(self.data):
            h, w = d.shape
            ci = 0 if self.shared else vi
            pr = project_splats(spl, d.K, d.pose, sig3)
            fr = rasterize(pr, d.shape, self.cfg.cutoff_sigmas)
            wv = p["w"][pr.idx]
            R = _accumulate(fr, wv, h * w) + bg
            a = d.basis @ p["c"][ci]
            L = softplus(a)
            res = d.mask * (L * R - d.target)
            total += float(np.sum(res * res))
            if not grad:
                continue
            gI = 2.0 * res * d.mask / self.denom
            gR = gI * L
            g["c"][ci] += d.basis.T @ (gI * R * sigmoid(a))
            if len(fr.pix) == 0:
                continue
            kept = len(pr.idx)
            gRf = gR[fr.pix]
            gw = np.empty((kept, 3))
            for ch in range(3):
                gw[:, ch] = np.bincount(fr.spl, weights=fr.g * gRf[:, ch], minlength=kept)
            g["w"][pr.idx] += gw
            gs = (gRf * wv[fr.spl]).sum(axis=1) * fr.g
            Ci = pr.conic[fr.spl]
            ex = Ci[:, 0, 0] * fr.dx + Ci[:, 0, 1] * fr.dy
            ey = Ci[:, 1, 0] * fr.dx + Ci[:, 1, 1] * fr.dy
            g_mu2d = np.stack([np.bincount(fr.spl, gs * ex, kept), np.bincount(fr.spl, gs * ey, kept)], -1)
            g_con = np.empty((kept, 2, 2))
            g_con[:, 0, 0] = np.bincount(fr.spl, -0.5 * gs * fr.dx * fr.dx, kept)
            g_con[:, 1, 1] = np.bincount(fr.spl, -0.5 * gs * fr.dy * fr.dy, kept)
            g_con[:, 0, 1] = g_con[:, 1, 0] = np.bincount(fr.spl, -0.5 * gs * fr.dx * fr.dy, kept)
            g_cov = -pr.conic @ g_con @ pr.conic
            g_A = _eig_floor_backward(pr.lam, pr.Q, g_cov)
            g_J = 2.0 * g_A @ pr.J @ pr.sigma_cam
            g_sigc = pr.J.transpose(0, 2, 1) @ g_A @ pr.J
            W = d.pose.R
            g_sig3[pr.idx] += W.T @ g_sigc @ W
            m, z = pr.m, pr.m[:, 2]
            K = d.K
            g_m = (pr.J.transpose(0, 2, 1) @ g_mu2d[:, :, None])[:, :, 0]
            g_m[:, 0] += -K.fx / z ** 2 * g_J[:, 0, 2]
            g_m[:, 1] += -K.fy / z ** 2 * g_J[:, 1, 2]
            g_m[:, 2] += (-K.fx / z ** 2 * g_J[:, 0, 0] + 2 * K.fx * m[:, 0] / z ** 3 * g_J[:, 0, 2]
                          - K.fy / z ** 2 * g_J[:, 1, 1] + 2 * K.fy * m[:, 1] / z ** 3 * g_J[:, 1, 2])
            g["mu"][pr.idx] += g_m @ W
        val = total / self.denom
        if not grad:
            return val, {}
        inner = Rs.transpose(0, 2, 1) @ g_sig3 @ Rs
        g["s"] = 2.0 * p["s"] * np.diagonal(inner, axis1=1, axis2=2)
        Kc = sig3 @ g_sig3 - g_sig3 @ sig3
        g["q"] = 2.0 * np.stack([Kc[:, 1, 2], Kc[:, 2, 0], Kc[:, 0, 1]], -1)
        return val, g


def photometric_loss(splats: SplatSet, views: list[ViewRecord], lights: list[SHLight],
                     masks: list[np.ndarray], cfg: RenderConfig | None = None):
    """Loss value and gradient dict for the given model; see :class:`PhotometricProblem`."""
    prob = PhotometricProblem(views, masks, lights[0].order, cfg, shared_light=len(lights) == 1 < len(views))
    return prob.loss(prob.params(splats, lights))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    splats: SplatSet
    lights: list[SHLight]
    trace: list[float] = field(default_factory=list)


def train(splats: SplatSet, views: list[ViewRecord], lights: list[SHLight], masks: list[np.ndarray],
          cfg: RenderConfig | None = None, freeze: tuple[str, ...] = (),
          trace_path: str | Path | None = None) -> TrainResult:
    """Refine splats and lights by masked photometric descent.

    Passing a single light for several views trains one shared light.
    ``freeze`` names parameter classes to hold fixed (``w mu s q c``).
    """
    cfg = cfg or RenderConfig()
    if len(masks) != len(views):
        raise ValueError("need one mask per view")
    shared = len(lights) == 1 and len(views) > 1
    if not shared and len(lights) != len(views):
        raise ValueError("need one light per view, or one shared light")
    order = lights[0].order
    prob = PhotometricProblem(views, masks, order, cfg, shared_light=shared)
    p0 = prob.params(splats, lights)
    floor = 1e-4 * splats.scene_scale
    lrs = {"w": cfg.lr_weight, "mu": cfg.lr_mean * splats.scene_scale, "s": cfg.lr_scale,
           "q": cfg.lr_rotation, "c": cfg.lr_sh}
    for k in freeze:
        lrs[k] = 0.0

    def objective(p):
        val, g = prob.loss(p)
        return val, {k: v for k, v in g.items() if lrs.get(k, 0.0) > 0}

    def retract(p, steps):
        out = dict(p)
        for k, s in steps.items():
            if k == "q":
                out["q"] = rotate_left(p["q"], -s)
            elif k == "s":
                out["s"] = np.maximum(p["s"] - s, floor)
            else:
                out[k] = p[k] - s
        return out

    trace_fh = open(trace_path, "w") if trace_path is not None else None

    def record(it, loss, p):
        if trace_fh is not None:
            trace_fh.write(json.dumps({"iteration": it, "loss": loss}) + "\n")

    try:
        record(0, prob.loss(p0, grad=False)[0], p0)
        res = BacktrackingAdam(lrs).run(objective, p0, cfg.train_iters, retract, record)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    p = res.params
    if not all(np.all(np.isfinite(v)) for v in p.values()):
        raise DivergedLoss("training produced non-finite parameters")
    out = SplatSet(p["mu"], p["q"], p["s"], p["w"], splats.scene_scale)
    new_lights = [SHLight(order, c) for c in p["c"]]
    return TrainResult(out, new_lights, res.losses)
