"""Coarse-to-fine joint refinement of intrinsics, poses and point maps.

Three confidence-weighted objectives are evaluated over every match
``(u_i, u_j)`` of every ordered view pair ``(i, j)``.  Writing
``T_ji = P_j P_i^-1`` for the relative transform:

* distance loss   ``L_D``: ``Xopt_j(u_j) - T_ji Xinit_i(u_i)``
* coarse loss     ``L_C``: ``Xinit_j(u_j) - T_ji Xinit_i(u_i)``
* reprojection    ``L_F``: ``u_i - proj(K_i, P_i, Xfused)`` where ``Xfused`` is
  the confidence-weighted world-frame average of ``Xopt_i(u_i)`` and
  ``Xopt_j(u_j)``.

Each is normalised by the total match weight. Stage one descends
``L_D + lam * L_C`` over poses and points, stage two ``L_F + lam * L_C`` over
intrinsics, poses and points. Rotation gradients are taken with respect to
a left tangent increment ``R <- Exp(delta) R``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DisconnectedGraph, DivergedLoss, EmptyMatches
from .geom import (
    Intrinsics,
    SE3Pose,
    quat_to_matrix,
    rotate_left,
    se3_compose,
    se3_invert,
)
from .optim import BacktrackingAdam, Params
from .views import ViewGraph, ViewRecord

logger = logging.getLogger(__name__)

DEPTH_EPS = 1e-9


@dataclass
class AlignConfig:
    lam: float = 100.0
    coarse_iters: int = 300
    fine_iters: int = 300
    step_size: float = 1e-2
    convergence_tol: float = 1e-9
    rot_param: str = "unit_quaternion"
    final_lr: float = 1.0
    point_step: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.coarse_iters < 1 or self.fine_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.final_lr <= 0 or self.point_step < 0:
            raise ValueError("final_lr must be positive and point_step non-negative")
        if self.rot_param != "unit_quaternion":
            raise ValueError("only unit_quaternion rotations are supported")


@dataclass
class LossReport:
    l_d: float
    l_c: float
    l_f: float
    lam: float
    per_pair: dict = field(default_factory=dict)

    @property
    def l_s1(self) -> float:
        return self.l_d + self.lam * self.l_c

    @property
    def l_s2(self) -> float:
        return self.l_f + self.lam * self.l_c


def _cross(a, b):
    return np.cross(a, b)


class AlignProblem:
    """Flattened, vectorised view of a :class:`ViewGraph`.

    Points of all views are concatenated into one ``(P, 3)`` array; every
    match becomes a row holding the two flat point indices, both view ids,
    the observed pixel in view ``i`` and the weight.
    """

    def __init__(self, graph: ViewGraph):
        self.graph = graph
        views = graph.views
        self.n_views = len(views)
        self.shapes = [v.shape for v in views]
        sizes = [h * w for h, w in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.x_init = np.concatenate([v.points.reshape(-1, 3) for v in views])
        self.x_init = np.where(np.isfinite(self.x_init), self.x_init, 0.0)
        self.conf = np.concatenate([v.confidence.reshape(-1) for v in views]).astype(np.float64)
        self.diag = np.array([np.hypot(h, w) for h, w in self.shapes])

        vi, vj, ii, jj, ui, c, pid = [], [], [], [], [], [], []
        self.pair_keys = sorted(graph.matches)
        for k, (i, j) in enumerate(self.pair_keys):
            ms = graph.matches[(i, j)]
            if len(ms) == 0:
                continue
            ra = np.rint(ms.pix_a).astype(np.int64)
            rb = np.rint(ms.pix_b).astype(np.int64)
            wi = self.shapes[i][1]
            wj = self.shapes[j][1]
            ii.append(self.offsets[i] + ra[:, 1] * wi + ra[:, 0])
            jj.append(self.offsets[j] + rb[:, 1] * wj + rb[:, 0])
            vi.append(np.full(len(ms), i))
            vj.append(np.full(len(ms), j))
            ui.append(ms.pix_a)
            c.append(ms.weights)
            pid.append(np.full(len(ms), k))
        cat = (lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape))
        self.vi = cat(vi, (0,)).astype(np.int64)
        self.vj = cat(vj, (0,)).astype(np.int64)
        self.ii = cat(ii, (0,)).astype(np.int64)
        self.jj = cat(jj, (0,)).astype(np.int64)
        self.ui = cat(ui, (0, 2))
        self.c = cat(c, (0,)).astype(np.float64)
        self.pid = cat(pid, (0,)).astype(np.int64)
        self.total_weight = float(self.c.sum())

    # -- parameter packing ----------------------------------------------

    def initial_params(self) -> Params:
        views = self.graph.views
        q = np.stack([(v.pose or SE3Pose()).rotation for v in views])
        t = np.stack([(v.pose or SE3Pose()).translation for v in views])
        x = np.concatenate([
            (v.points if v.points_opt is None else v.points_opt).reshape(-1, 3) for v in views
        ])
        x = np.where(np.isfinite(x), x, 0.0)
        K = np.stack([(v.K or v.K_init).as_array() for v in views])
        return {"q": q, "t": t, "X": x, "K": K}

    def _check(self):
        if self.total_weight <= 0:
            raise EmptyMatches("total match weight is zero; losses are undefined")

    # -- shared transport ------------------------------------------------

    def _transport(self, R, t, x):
        """``T_ji x`` for camera-i points ``x`` with intermediates for backprop."""
        v = x - t[self.vi]
        w = np.einsum("mki,mk->mi", R[self.vi], v)  # R_i^T v
        a = np.einsum("mij,mj->mi", R[self.vj], w)
        return a + t[self.vj], v, a

    def _transport_backward(self, R, v, a, G, gq, gt):
        np.add.at(gt, self.vj, G)
        np.add.at(gq, self.vj, _cross(a, G))
        h = np.einsum("mij,mj->mi", R[self.vi], np.einsum("mki,mk->mi", R[self.vj], G))
        np.add.at(gt, self.vi, -h)
        np.add.at(gq, self.vi, -_cross(v, h))

    # -- losses -------------------------------------------------------------

    def loss_distance(self, p: Params, grad: bool = True):
        self._check()
        R = quat_to_matrix(p["q"])
        y, v, a = self._transport(R, p["t"], self.x_init[self.ii])
        r = p["X"][self.jj] - y
        val = float(np.sum(self.c * np.einsum("mi,mi->m", r, r)) / self.total_weight)
        if not grad:
            return val, None
        g = 2.0 * self.c[:, None] * r / self.total_weight
        gq = np.zeros((self.n_views, 3))
        gt = np.zeros((self.n_views, 3))
        gx = np.zeros_like(p["X"])
        np.add.at(gx, self.jj, g)
        self._transport_backward(R, v, a, -g, gq, gt)
        return val, {"q": gq, "t": gt, "X": gx}

    def loss_coarse(self, p: Params, grad: bool = True):
        self._check()
        R = quat_to_matrix(p["q"])
        y, v, a = self._transport(R, p["t"], self.x_init[self.ii])
        r = self.x_init[self.jj] - y
        val = float(np.sum(self.c * np.einsum("mi,mi->m", r, r)) / self.total_weight)
        if not grad:
            return val, None
        g = -2.0 * self.c[:, None] * r / self.total_weight
        gq = np.zeros((self.n_views, 3))
        gt = np.zeros((self.n_views, 3))
        self._transport_backward(R, v, a, g, gq, gt)
        return val, {"q": gq, "t": gt}

    def loss_reproj(self, p: Params, grad: bool = True):
        self._check()
        R = quat_to_matrix(p["q"])
        t, X, K = p["t"], p["X"], p["K"]
        vi, vj = self.vi, self.vj
        ci = self.conf[self.ii]
        cj = self.conf[self.jj]
        s = ci + cj
        safe = np.where(s > 0, s, 1.0)
        al_i = np.where(s > 0, ci / safe, 0.5)
        al_j = 1.0 - al_i
        v_i = X[self.ii] - t[vi]
        v_j = X[self.jj] - t[vj]
        w_i = np.einsum("mki,mk->mi", R[vi], v_i)
        w_j = np.einsum("mki,mk->mi", R[vj], v_j)
        xw = al_i[:, None] * w_i + al_j[:, None] * w_j
        rx = np.einsum("mij,mj->mi", R[vi], xw)
        pc = rx + t[vi]
        z = pc[:, 2]
        front = z > DEPTH_EPS
        zs = np.where(front, z, 1.0)
        fx, fy, cx, cy = K[vi, 0], K[vi, 1], K[vi, 2], K[vi, 3]
        px = fx * pc[:, 0] / zs + cx
        py = fy * pc[:, 1] / zs + cy
        e = self.ui - np.stack([px, py], -1)
        e2 = np.einsum("mi,mi->m", e, e)
        clamp2 = (4.0 * self.diag[vi]) ** 2
        live = front & (e2 < clamp2)
        term = np.where(live, e2, clamp2)
        val = float(np.sum(self.c * term) / self.total_weight)
        if not grad:
            return val, None

        gpi = np.where(live[:, None], -2.0 * self.c[:, None] * e / self.total_weight, 0.0)
        gK = np.zeros((self.n_views, 4))
        np.add.at(gK[:, 0], vi, gpi[:, 0] * pc[:, 0] / zs)
        np.add.at(gK[:, 1], vi, gpi[:, 1] * pc[:, 1] / zs)
        np.add.at(gK[:, 2], vi, gpi[:, 0])
        np.add.at(gK[:, 3], vi, gpi[:, 1])
        gp = np.stack([
            gpi[:, 0] * fx / zs,
            gpi[:, 1] * fy / zs,
            -(gpi[:, 0] * fx * pc[:, 0] + gpi[:, 1] * fy * pc[:, 1]) / zs ** 2,
        ], -1)
        gq = np.zeros((self.n_views, 3))
        gt = np.zeros((self.n_views, 3))
        gx = np.zeros_like(X)
        np.add.at(gt, vi, gp)
        np.add.at(gq, vi, _cross(rx, gp))
        gxw = np.einsum("mki,mk->mi", R[vi], gp)
        for idx, vv, vec, al in ((self.ii, vi, v_i, al_i), (self.jj, vj, v_j, al_j)):
            hw = np.einsum("mij,mj->mi", R[vv], al[:, None] * gxw)
            np.add.at(gx, idx, hw)
            np.add.at(gt, vv, -hw)
            np.add.at(gq, vv, -_cross(vec, hw))
        return val, {"q": gq, "t": gt, "X": gx, "K": gK}

    # -- reporting ------------------------------------------------------------

    def report(self, p: Params, lam: float, per_pair: bool = False) -> LossReport:
        ld, _ = self.loss_distance(p, grad=False)
        lc, _ = self.loss_coarse(p, grad=False)
        lf, _ = self.loss_reproj(p, grad=False)
        return LossReport(ld, lc, lf, lam, per_pair=self.per_pair(p) if per_pair else {})

    def per_pair(self, p: Params) -> dict:
        """Share of each ordered pair in ``(l_d, l_c, l_f)``; shares sum to the totals."""
        R = quat_to_matrix(p["q"])
        y, _, _ = self._transport(R, p["t"], self.x_init[self.ii])
        rd = np.einsum("mi,mi->m", p["X"][self.jj] - y, p["X"][self.jj] - y)
        rc = np.einsum("mi,mi->m", self.x_init[self.jj] - y, self.x_init[self.jj] - y)
        out = {}
        for k, key in enumerate(self.pair_keys):
            sel = self.pid == k
            if not np.any(sel):
                continue
            out[key] = (
                float(np.sum(self.c[sel] * rd[sel]) / self.total_weight),
                float(np.sum(self.c[sel] * rc[sel]) / self.total_weight),
            )
        return out


# -------------------------------------------------------------------------
# module-level entry points
# -------------------------------------------------------------------------

def loss_distance(graph: ViewGraph):
    """``L_D`` and its gradient for the graph's current estimates."""
    pr = AlignProblem(graph)
    return pr.loss_distance(pr.initial_params())


def loss_coarse(graph: ViewGraph):
    pr = AlignProblem(graph)
    return pr.loss_coarse(pr.initial_params())


def loss_reproj(graph: ViewGraph):
    pr = AlignProblem(graph)
    return pr.loss_reproj(pr.initial_params())


def estimate_intrinsics(view: ViewRecord) -> Intrinsics:
    """Confidence-weighted focal lengths from a camera-frame point map.

    The principal point is taken at the image center; each focal length is
    the closed-form least-squares fit of ``u - c = f * x / z``.
    """
    h, w = view.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = view.points
    ok = view.valid & np.isfinite(pts).all(-1) & (pts[..., 2] > DEPTH_EPS)
    c = view.confidence[ok]
    xz = pts[..., 0][ok] / pts[..., 2][ok]
    yz = pts[..., 1][ok] / pts[..., 2][ok]
    fx = np.sum(c * (uu[ok] - cx) * xz) / np.sum(c * xz * xz)
    fy = np.sum(c * (vv[ok] - cy) * yz) / np.sum(c * yz * yz)
    return Intrinsics(float(fx), float(fy), cx, cy, w, h)


def kabsch(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted rigid fit ``dst ≈ R @ src + t``."""
    wsum = weights.sum()
    ms = (weights[:, None] * src).sum(0) / wsum
    md = (weights[:, None] * dst).sum(0) / wsum
    H = ((src - ms) * weights[:, None]).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, md - R @ ms


def init_poses(graph: ViewGraph) -> list[SE3Pose]:
    """Chain pairwise rigid fits along a maximum-weight spanning tree from view 0."""
    pr = AlignProblem(graph)
    n = pr.n_views
    weight = np.zeros((n, n))
    for (i, j), ms in graph.matches.items():
        weight[i, j] += ms.weights.sum()
        weight[j, i] += ms.weights.sum()
    poses: list[SE3Pose | None] = [None] * n
    poses[0] = SE3Pose.identity()
    while any(p is None for p in poses):
        best, edge = 0.0, None
        for i in range(n):
            if poses[i] is None:
                continue
            for j in range(n):
                if poses[j] is None and weight[i, j] > best:
                    best, edge = weight[i, j], (i, j)
        if edge is None:
            raise DisconnectedGraph("views are not connected by matches")
        i, j = edge
        sel_ij = (pr.vi == i) & (pr.vj == j)
        sel_ji = (pr.vi == j) & (pr.vj == i)
        src = np.concatenate([pr.x_init[pr.ii[sel_ij]], pr.x_init[pr.jj[sel_ji]]])
        dst = np.concatenate([pr.x_init[pr.jj[sel_ij]], pr.x_init[pr.ii[sel_ji]]])
        w = np.concatenate([pr.c[sel_ij], pr.c[sel_ji]])
        if len(w) < 3:
            raise DisconnectedGraph(f"pair {edge} has fewer than 3 matches")
        R, t = kabsch(src, dst, w)
        poses[j] = se3_compose(SE3Pose.from_matrix(R, t), poses[i])
    return poses


def _params_to_graph(pr: AlignProblem, p: Params) -> ViewGraph:
    views = []
    for k, v in enumerate(pr.graph.views):
        h, w = v.shape
        pts = p["X"][pr.offsets[k]:pr.offsets[k + 1]].reshape(h, w, 3).copy()
        pts[~v.valid] = np.nan
        views.append(v.with_(
            pose=SE3Pose(p["q"][k], p["t"][k]),
            K=Intrinsics.from_array(p["K"][k], w, h),
            points_opt=pts,
        ))
    return ViewGraph(views, dict(pr.graph.matches))


def prepare(graph: ViewGraph) -> ViewGraph:
    """Fill missing intrinsics/poses and re-anchor the world frame at view 0."""
    views = list(graph.views)
    for k, v in enumerate(views):
        if v.K is None:
            views[k] = v.with_(K=v.K_init or estimate_intrinsics(v))
        if views[k].pose is None and views[k].pose_init is not None:
            views[k] = views[k].with_(pose=views[k].pose_init)
    g = ViewGraph(views, dict(graph.matches))
    if any(v.pose is None for v in views):
        poses = init_poses(g)
        views = [v.with_(pose=p) for v, p in zip(views, poses)]
    inv0 = se3_invert(views[0].pose)
    views = [v.with_(pose=se3_compose(v.pose, inv0)) for v in views]
    views[0] = views[0].with_(pose=SE3Pose.identity())
    return ViewGraph(views, dict(graph.matches))


def _pivot_retract(pivots: np.ndarray):
    """Retraction rotating each camera about a fixed camera-frame pivot.

    ``R <- Exp(-s) R`` together with ``t <- Exp(-s) (t - p) + p`` keeps the
    pivot ``p`` (the view's point centroid) in place, which decouples the
    rotation step from lateral translation.
    """
    def retract(p: Params, steps: Params) -> Params:
        out = dict(p)
        t = p["t"]
        if "q" in steps:
            out["q"] = rotate_left(p["q"], -steps["q"])
            dR = quat_to_matrix(rotate_left(np.tile([1.0, 0, 0, 0], (len(t), 1)), -steps["q"]))
            t = np.einsum("nij,nj->ni", dR, t - pivots) + pivots
        if "t" in steps:
            t = t - steps["t"]
        out["t"] = t
        for k, s in steps.items():
            if k not in ("q", "t"):
                out[k] = p[k] - s
        return out
    return retract


def optimize(graph: ViewGraph, cfg: AlignConfig | None = None,
             trace_path: str | Path | None = None) -> tuple[ViewGraph, list[LossReport]]:
    """Two-stage descent; returns the refined graph and the accepted-step trace.

    View 0 is held at the identity pose (gauge). Intrinsics are free only in
    the second stage.
    """
    cfg = cfg or AlignConfig()
    if len(graph.views) < 2:
        raise ValueError("alignment needs at least two views")
    if not graph.is_connected():
        raise DisconnectedGraph("view graph is not connected")
    g = prepare(graph)
    pr = AlignProblem(g)
    pr._check()
    params = pr.initial_params()
    lam = cfg.lam

    valid_all = np.concatenate([v.valid.reshape(-1) for v in g.views])
    scene = float(np.mean(np.linalg.norm(pr.x_init[valid_all], axis=1))) if valid_all.any() else 1.0
    focal = float(np.mean(params["K"][:, :2]))

    pivots = np.zeros((pr.n_views, 3))
    for k in range(pr.n_views):
        sl = slice(pr.offsets[k], pr.offsets[k + 1])
        ok = valid_all[sl]
        if ok.any():
            pivots[k] = pr.x_init[sl][ok].mean(axis=0)

    def frozen(gr: Params, p: Params) -> Params:
        # rotation gradient for the pivoted parametrization
        gr["q"] = gr["q"] + _cross(p["t"] - pivots, gr["t"])
        for k in ("q", "t"):
            if k in gr:
                gr[k] = gr[k].copy()
                gr[k][0] = 0.0
        return gr

    def stage1(p):
        ld, gd = pr.loss_distance(p)
        lc, gc = pr.loss_coarse(p)
        gr = {"q": gd["q"] + lam * gc["q"], "t": gd["t"] + lam * gc["t"], "X": gd["X"]}
        return ld + lam * lc, frozen(gr, p)

    def stage2(p):
        lf, gf = pr.loss_reproj(p)
        lc, gc = pr.loss_coarse(p)
        gr = {"q": gf["q"] + lam * gc["q"], "t": gf["t"] + lam * gc["t"], "X": gf["X"], "K": gf["K"]}
        return lf + lam * lc, frozen(gr, p)

    lrs = {"q": cfg.step_size, "t": cfg.step_size * scene, "X": cfg.step_size * scene * cfg.point_step,
           "K": cfg.step_size * 0.1 * focal}
    trace: list[LossReport] = []
    records: list[dict] = []

    def record(stage):
        def cb(it, loss, p):
            rep = pr.report(p, lam)
            trace.append(rep)
            records.append({"iteration": it, "stage": stage, "l_d": rep.l_d, "l_c": rep.l_c,
                            "l_f": rep.l_f, "total": loss})
        return cb

    rep0 = pr.report(params, lam)
    trace.append(rep0)
    records.append({"iteration": 0, "stage": 1, "l_d": rep0.l_d, "l_c": rep0.l_c,
                    "l_f": rep0.l_f, "total": rep0.l_s1})
    retract = _pivot_retract(pivots)
    opt = BacktrackingAdam(lrs, tol=cfg.convergence_tol, final_lr=cfg.final_lr)
    res1 = opt.run(stage1, params, cfg.coarse_iters, retract=retract, callback=record(1))
    params = res1.params
    rep1 = pr.report(params, lam)
    records.append({"iteration": 0, "stage": 2, "l_d": rep1.l_d, "l_c": rep1.l_c,
                    "l_f": rep1.l_f, "total": rep1.l_s2})
    res2 = opt.run(stage2, params, cfg.fine_iters, retract=retract, callback=record(2))
    params = res2.params
    if not np.all(np.isfinite(params["X"])):
        raise DivergedLoss("alignment produced non-finite points")
    logger.info("align: stage1 %d accepted, stage2 %d accepted", res1.accepted, res2.accepted)
    if trace_path is not None:
        with open(trace_path, "w") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")
    return _params_to_graph(pr, params), trace


def similarity_align(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Umeyama fit ``dst ≈ s R src + t`` for point sets of shape (N, 3)."""
    ms, md = src.mean(0), dst.mean(0)
    a, b = src - ms, dst - md
    H = a.T @ b / len(src)
    U, S, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    s = np.trace(np.diag(S) @ D) / np.mean(np.sum(a * a, 1))
    return float(s), R, md - s * R @ ms


def pose_errors(est: list[SE3Pose], gt: list[SE3Pose], diameter: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-view rotation error (degrees) and center error (fraction of ``diameter``)
    after the best similarity alignment of the estimate onto ground truth.

    The aligning rotation is the chordal mean of ``R_gt^T R_est`` over views;
    scale and offset are then least-squares fits of the camera centers. Camera
    centers alone are a poor anchor here: on a short arc they leave the
    rotation about the arc's chord almost undetermined.
    """
    ce = np.stack([p.center for p in est])
    cg = np.stack([p.center for p in gt])
    M = sum(pg.R.T @ pe.R for pe, pg in zip(est, gt))
    U, _, Vt = np.linalg.svd(M)
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
    a = ce - ce.mean(0)
    b = cg - cg.mean(0)
    ra = a @ R.T
    s = float(np.sum(ra * b) / max(np.sum(a * a), 1e-300))
    t = cg.mean(0) - s * R @ ce.mean(0)
    rot = np.array([np.degrees(float(np_angle(pe.R @ R.T, pg.R))) for pe, pg in zip(est, gt)])
    trans = np.linalg.norm((s * ce @ R.T + t) - cg, axis=1) / diameter
    return rot, trans


def np_angle(ra, rb):
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))
