"""Acceptance suite: one test per criterion, tagged ``criterion(n)``.

The terminal summary prints a PASS/FAIL line per criterion.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from crowdsplat.align import AlignProblem, optimize, pose_errors
from crowdsplat.cli import main as css
from crowdsplat.config import PipelineConfig
from crowdsplat.geom import Intrinsics, SE3Pose, quat_normalize, rotate_left
from crowdsplat.ginit import SplatSet, init_splats, neighborhood_cov
from crowdsplat.illum import SHLight, eval_illum, illum_loss, n_coeffs, sh_basis_all
from crowdsplat.mask import otsu_threshold
from crowdsplat.matching import MatchSet, reciprocal_match
from crowdsplat.pipeline import match_views
from crowdsplat.render import PhotometricProblem, RenderConfig, render_reflectance, train
from crowdsplat.synth import DIAMETER, NoiseModel, gen_scene, gen_views, with_ground_truth
from crowdsplat.views import PointMap, ViewGraph, ViewRecord

from oracles import brute_mutual_nn, brute_otsu, fd_directional, naive_render, rel_err

N_GRAD = 50


# --------------------------------------------------------------------------
# 1. gradient correctness
# --------------------------------------------------------------------------

def random_align_problem(seed: int) -> tuple[AlignProblem, dict]:
    rng = np.random.default_rng(seed)
    n, h, w = 3, 5, 6
    views = []
    for k in range(n):
        pts = np.concatenate([rng.uniform(-1, 1, (h, w, 2)), rng.uniform(2, 4, (h, w, 1))], -1)
        f = rng.uniform(8, 12)
        K = Intrinsics(f, f * rng.uniform(0.9, 1.1), (w - 1) / 2 + rng.uniform(-0.5, 0.5),
                       (h - 1) / 2 + rng.uniform(-0.5, 0.5), w, h)
        pose = SE3Pose(rotate_left(np.array([1.0, 0, 0, 0]), rng.normal(0, 0.1, 3)), rng.normal(0, 0.2, 3))
        views.append(ViewRecord(rng.uniform(0, 1, (h, w, 3)), pts, rng.random((h, w)) > 0.1,
                                rng.uniform(0.2, 1.0, (h, w)), rng.normal(size=(h, w, 4)), K=K, pose=pose,
                                points_opt=pts + rng.normal(0, 0.05, pts.shape)))
    matches = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            m = int(rng.integers(5, 11))
            pa = np.stack([rng.integers(0, w, m), rng.integers(0, h, m)], -1) + rng.uniform(-0.4, 0.4, (m, 2))
            pb = np.stack([rng.integers(0, w, m), rng.integers(0, h, m)], -1).astype(float)
            matches[(i, j)] = MatchSet(pa, pb, rng.uniform(0.2, 1.0, m))
    pr = AlignProblem(ViewGraph(views, matches))
    return pr, pr.initial_params()


def _check_loss_grads(loss, p, rng) -> float:
    _, g = loss(p)
    worst = 0.0
    for key, gk in g.items():
        d = rng.normal(size=gk.shape)
        fd = fd_directional(lambda q: loss(q, grad=False)[0], p, key, d, rotation=(key == "q"))
        worst = max(worst, rel_err(fd, float(np.sum(gk * d))))
    return worst


def random_photometric(seed: int):
    rng = np.random.default_rng(seed)
    n, h, w = 6, 14, 18
    splats = SplatSet(rng.normal(0, 0.3, (n, 3)), quat_normalize(rng.normal(size=(n, 4))),
                      rng.uniform(0.05, 0.2, (n, 3)), rng.uniform(0, 1, (n, 3)), 2.0)
    views, masks, lights = [], [], []
    for _ in range(2):
        K = Intrinsics(25 + 5 * rng.random(), 25 + 5 * rng.random(), (w - 1) / 2, (h - 1) / 2, w, h)
        c = rng.normal(size=3)
        pts = rng.normal(size=(h, w, 3))
        pts[..., 2] = np.abs(pts[..., 2]) + 1
        views.append(ViewRecord(rng.uniform(0, 1, (h, w, 3)), pts, rng.random((h, w)) > 0.2,
                                np.ones((h, w)), np.zeros((h, w, 2)), K=K,
                                pose=SE3Pose.look_at(3 * c / np.linalg.norm(c))))
        masks.append(rng.random((h, w)) > 0.3)
        lights.append(SHLight(2, rng.normal(0, 0.5, (9, 3))))
    prob = PhotometricProblem(views, masks, 2, RenderConfig())
    return prob, prob.params(splats, lights)


@pytest.mark.criterion(1)
def test_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(N_GRAD):
        rng = np.random.default_rng(10_000 + seed)
        pr, p = random_align_problem(seed)
        for name, loss in (("l_d", pr.loss_distance), ("l_c", pr.loss_coarse), ("l_f", pr.loss_reproj)):
            worst[name] = max(worst.get(name, 0.0), _check_loss_grads(loss, p, rng))
        prob, pp = random_photometric(seed)
        worst["render"] = max(worst.get("render", 0.0), _check_loss_grads(prob.loss, pp, rng))

        order = int(rng.integers(0, 5))
        basis = sh_basis_all(order, rng.uniform(0, np.pi, 40), rng.uniform(-np.pi, np.pi, 40))
        targets = rng.uniform(0, 2, (40, 3))
        coeffs = rng.normal(0, 0.5, (n_coeffs(order), 3))
        _, g = illum_loss(coeffs, basis, targets)
        d = rng.normal(size=coeffs.shape)
        fd = fd_directional(lambda q: illum_loss(q["c"], basis, targets)[0], {"c": coeffs}, "c", d)
        worst["sh_fit"] = max(worst.get("sh_fit", 0.0), rel_err(fd, float(np.sum(g * d))))
    elapsed = time.perf_counter() - t0
    print(f"worst relative errors {worst}, {elapsed:.1f} s")
    for name in ("l_d", "l_c", "l_f", "sh_fit"):
        assert worst[name] < 1e-4, name
    assert worst["render"] < 1e-3
    assert elapsed < 120


# --------------------------------------------------------------------------
# 2. pose recovery
# --------------------------------------------------------------------------

def perturbed(views, poses, deg: float, seed: int):
    rng = np.random.default_rng(seed)
    out = []
    for v, P in zip(views, poses):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        q = rotate_left(P.rotation, np.deg2rad(deg) * axis)
        t = P.translation * (1 + 0.05 * rng.choice([-1, 1]))
        out.append(v.with_(pose_init=SE3Pose(q, t)))
    return out


@pytest.mark.criterion(2)
def test_pose_recovery():
    cfg = PipelineConfig(n_views=8, point_sigma=0.005)
    scene = gen_scene(cfg.seed, n_views=8)
    data = gen_views(scene, NoiseModel(point_sigma=cfg.point_sigma))
    views = perturbed(data.views, scene.poses, 5.0, seed=1)
    t0 = time.perf_counter()
    graph, _ = optimize(ViewGraph(views, match_views(views, cfg)), cfg.align_config())
    elapsed = time.perf_counter() - t0
    rot, trans = pose_errors([v.pose for v in graph.views], scene.poses, DIAMETER)
    print(f"rotation error mean {rot.mean():.3f} deg, translation {100 * trans.mean():.2f}% "
          f"of diameter, {elapsed:.1f} s")
    assert rot.mean() < 1.0
    assert trans.mean() < 0.02
    assert elapsed < 60


# --------------------------------------------------------------------------
# 3. zero-noise fixed points
# --------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_zero_noise_fixed_points():
    scene = gen_scene(3, n_views=4)
    data = gen_views(scene)
    views = with_ground_truth(data, scene)
    pr = AlignProblem(ViewGraph(views, data.matches))
    p = pr.initial_params()
    losses = [pr.loss_distance(p, grad=False)[0], pr.loss_coarse(p, grad=False)[0],
              pr.loss_reproj(p, grad=False)[0]]
    print(f"l_d, l_c, l_f at ground truth: {losses}")
    assert len(pr.c) > 0
    assert max(losses) < 1e-10

    masks = [np.ones(v.shape, dtype=bool) for v in views]
    prob = PhotometricProblem(views, masks, scene.lights[0].order, RenderConfig())
    val, grads = prob.loss(prob.params(scene.splats, scene.lights))
    assert val < 1e-10
    assert max(float(np.abs(g).max()) for g in grads.values()) < 1e-10
    res = train(scene.splats, views, scene.lights, masks, RenderConfig(train_iters=50))
    assert max(res.trace) < 1e-10
    after = PhotometricProblem(views, masks, scene.lights[0].order, RenderConfig())
    assert after.loss(after.params(res.splats, res.lights), grad=False)[0] < 1e-10


# --------------------------------------------------------------------------
# 4. covariance initialization invariants
# --------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_covariance_invariants():
    rng = np.random.default_rng(4)
    views, pms = [], []
    h = w = 50
    for _ in range(5):
        scale = np.exp(rng.uniform(-9, 0, (h, w, 1))) * np.exp(rng.uniform(-2, 0, (h, w, 3)))
        pts = rng.normal(size=(h, w, 3)) * scale + np.array([0.0, 0.0, 3.0])
        valid = rng.random((h, w)) > 0.15
        views.append(ViewRecord(np.zeros((h, w, 3)), pts, valid, np.ones((h, w)), np.zeros((h, w, 1)),
                                pose=SE3Pose()))
        pms.append(PointMap(pts, valid))
    splats = init_splats(views, stride=1)
    floor = 1e-4 * splats.scene_scale
    medians = []
    for v, pm in zip(views, pms):
        for r, c in zip(*np.nonzero(v.valid)):
            ok = pm.valid[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
            if ok.sum() < 3:
                continue
            sv = np.sqrt(np.maximum(np.linalg.eigvalsh(neighborhood_cov(pm, (c, r))), 0.0))
            medians.append(np.median(sv))
    medians = np.array(medians)
    assert len(splats) == len(medians) >= 10_000
    cov = splats.covariances()
    eig = np.linalg.eigvalsh(cov)
    asym = np.abs(cov - cov.transpose(0, 2, 1)).max(axis=(1, 2))
    bound = np.maximum(medians, floor) ** 2
    print(f"{len(cov)} neighbourhoods, {np.mean(medians < floor):.1%} with median below the floor")
    assert np.all(asym <= 1e-12 * np.abs(cov).max(axis=(1, 2)))
    assert np.all(eig >= 0)
    assert np.all(eig[:, -1] <= bound + 1e-9)
    assert np.all(eig[:, 0] >= floor ** 2 * (1 - 1e-6))
    rot = splats.rotations()
    assert np.abs(rot.transpose(0, 2, 1) @ rot - np.eye(3)).max() < 1e-9
    assert np.all(np.diff(splats.scales, axis=1) <= 0)


# --------------------------------------------------------------------------
# 5. SH correctness
# --------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_sh_correctness():
    nt, nphi = 256, 512
    theta = (np.arange(nt) + 0.5) * np.pi / nt
    phi = (np.arange(nphi) + 0.5) * 2 * np.pi / nphi - np.pi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    B = sh_basis_all(4, tt, pp).reshape(-1, n_coeffs(4))
    dA = (np.sin(tt) * (np.pi / nt) * (2 * np.pi / nphi)).reshape(-1)
    gram = B.T @ (B * dA[:, None])
    err = np.abs(gram - np.eye(n_coeffs(4))).max()
    print(f"orthonormality error {err:.2e}")
    assert err < 1e-3

    rng = np.random.default_rng(5)
    d = rng.normal(size=(100_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    th, ph = np.arccos(np.clip(d[:, 2], -1, 1)), np.arctan2(d[:, 1], d[:, 0])
    for order in range(11):
        light = SHLight(order, rng.normal(0, 1, (n_coeffs(order), 3)))
        assert np.all(eval_illum(light, th, ph) > 0)
    assert np.all(eval_illum(SHLight.zeros(10), th, ph) == np.log(2.0))


# --------------------------------------------------------------------------
# 6. renderer oracle
# --------------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_renderer_matches_naive_loop():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        n, h, w = int(rng.integers(3, 12)), 16, 20
        splats = SplatSet(rng.normal(0, 0.5, (n, 3)), quat_normalize(rng.normal(size=(n, 4))),
                          np.exp(rng.uniform(-4, -1, (n, 3))), rng.uniform(0, 1, (n, 3)), 2.0)
        K = Intrinsics(20 + 10 * rng.random(), 20 + 10 * rng.random(), (w - 1) / 2, (h - 1) / 2, w, h)
        c = rng.normal(size=3)
        P = SE3Pose.look_at(rng.uniform(2, 4) * c / np.linalg.norm(c))
        view = ViewRecord(np.zeros((h, w, 3)), np.zeros((h, w, 3)), np.zeros((h, w), bool),
                          np.zeros((h, w)), np.zeros((h, w, 1)), K=K, pose=P)
        fast = render_reflectance(splats, view)
        slow = naive_render(splats.means, splats.quats, splats.scales, splats.weights, K, P, (h, w))
        worst = max(worst, float(np.abs(fast - slow).max()))
    print(f"max abs difference {worst:.2e}")
    assert worst < 1e-6


# --------------------------------------------------------------------------
# 7. Otsu oracle
# --------------------------------------------------------------------------

def random_confidence(rng) -> np.ndarray:
    kind = rng.integers(0, 4)
    n = int(rng.integers(50, 2000))
    if kind == 0:
        return rng.random(n)
    if kind == 1:
        k = rng.random(n) < rng.uniform(0.1, 0.9)
        return np.where(k, rng.normal(0.2, 0.05, n), rng.normal(0.8, 0.1, n))
    if kind == 2:
        return rng.integers(0, int(rng.integers(2, 12)), n).astype(float)
    return rng.exponential(1.0, n) * rng.uniform(0.5, 3.0)


@pytest.mark.criterion(7)
def test_otsu_matches_exhaustive_search():
    rng = np.random.default_rng(7)
    done = 0
    while done < 100:
        conf = random_confidence(rng)
        if np.ptp(conf) == 0:
            continue
        assert otsu_threshold(conf) == brute_otsu(conf)
        done += 1


# --------------------------------------------------------------------------
# 8. matching oracle
# --------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_matching_matches_brute_force():
    rng = np.random.default_rng(8)
    for k in range(100):
        h, w, d = int(rng.integers(3, 9)), int(rng.integers(3, 9)), int(rng.integers(1, 5))
        if k % 4 == 0:  # coarse integer features produce ties
            a = rng.integers(0, 3, (h, w, d)).astype(float)
            b = rng.integers(0, 3, (h + 1, w, d)).astype(float)
        else:
            a, b = rng.normal(size=(h, w, d)), rng.normal(size=(h + 1, w, d))
        stride = int(rng.integers(1, 3))
        va = rng.random((h, w)) > 0.2 if k % 2 else None
        vb = rng.random((h + 1, w)) > 0.2 if k % 2 else None
        got = reciprocal_match(a, b, stride, va, vb).pairs()
        assert got == brute_mutual_nn(a, b, stride, va, vb)


@pytest.mark.criterion(8)
def test_matching_recovers_ground_truth_at_stride():
    cfg = PipelineConfig()
    scene = gen_scene(cfg.seed, n_views=4)
    data = gen_views(scene, stride=cfg.match_stride)
    found = match_views(data.views, cfg)
    total = 0
    for key, gt in data.matches.items():
        missing = gt.pairs() - found[key].pairs()
        assert not missing, f"pair {key} misses {len(missing)} of {len(gt)} correspondences"
        total += len(gt)
    assert total > 0
    print(f"recovered all {total} ground-truth correspondences")


# --------------------------------------------------------------------------
# 9-11. CLI-level runs
# --------------------------------------------------------------------------

def run_css(*args) -> None:
    code = css([str(a) for a in args])
    assert code == 0, f"css {' '.join(map(str, args))} exited {code}"


@pytest.mark.criterion(9)
@pytest.mark.slow
def test_ablation_directions(tmp_path):
    cfg = PipelineConfig(occluder_count=2, point_sigma=0.002, train_iters=300)
    cfg.save(tmp_path / "cfg.txt")
    t0 = time.perf_counter()
    run_css("synth", "--config", tmp_path / "cfg.txt", "--out", tmp_path / "data")
    run_css("ablate", tmp_path / "data", "--config", tmp_path / "cfg.txt", "--out", tmp_path / "run")
    elapsed = time.perf_counter() - t0
    table = json.loads((tmp_path / "run" / "ablate" / "report.json").read_text())
    psnr = {k: v["psnr"] for k, v in table.items()}
    print(f"PSNR {psnr}, {elapsed:.1f} s")
    assert psnr["full"] > psnr["no_ib"]
    assert psnr["full"] > psnr["no_cm"]
    assert psnr["no_cm_ib"] < min(psnr["full"], psnr["no_cm"], psnr["no_ib"])
    assert elapsed < 600


@pytest.mark.criterion(10)
@pytest.mark.slow
def test_end_to_end_quality(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    t0 = time.perf_counter()
    run_css("synth", "--out", data)
    for stage in ("align", "init", "train", "render", "eval"):
        run_css(stage, data, "--out", run)
    elapsed = time.perf_counter() - t0
    report = json.loads((run / "eval" / "report.json").read_text())
    print(f"PSNR {report['psnr']:.2f} dB, SSIM {report['ssim']:.4f}, {elapsed:.1f} s")
    assert report["psnr"] >= 35.0
    assert report["ssim"] >= 0.95
    assert elapsed < 300


DET_CONFIG = """\
n_views=3
occluder_count=1
point_sigma=0.002
coarse_iters=30
fine_iters=30
train_iters=15
sh_order=3
"""


def _tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _cli_chain(root: Path, threads: int) -> dict[str, str]:
    env = dict(os.environ, OMP_NUM_THREADS=str(threads), OPENBLAS_NUM_THREADS=str(threads),
               MKL_NUM_THREADS=str(threads))
    root.mkdir(parents=True)
    cfg = root / "cfg.txt"
    cfg.write_text(DET_CONFIG)
    data, run = root / "data", root / "run"
    cmds = [["synth", "--out", data], ["align", data, "--out", run], ["init", data, "--out", run],
            ["train", data, "--out", run], ["render", data, "--out", run],
            ["render", data, "--out", run, "--between", "0", "1", "--frac", "0.3"],
            ["eval", data, "--out", run], ["ablate", data, "--out", root / "abl"]]
    for c in cmds:
        args = [sys.executable, "-m", "crowdsplat.cli", *map(str, c), "--config", str(cfg), "--seed", "5"]
        res = subprocess.run(args, env=env, capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
    return _tree_digest(root)


@pytest.mark.criterion(11)
@pytest.mark.slow
def test_cli_determinism(tmp_path):
    runs = [_cli_chain(tmp_path / f"r{k}", threads) for k, threads in enumerate((1, 4, 1))]
    assert len(runs[0]) > 20
    assert runs[0] == runs[1] == runs[2]
