import numpy as np
import pytest

from crowdsplat.geom import Intrinsics, SE3Pose
from crowdsplat.ginit import SplatSet
from crowdsplat.illum import SHLight
from crowdsplat.render import RenderConfig, compose, photometric_loss, render_reflectance, train
from crowdsplat.views import ViewRecord

from oracles import naive_render

K = Intrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)


def blank_view(P=None):
    h, w = 12, 16
    return ViewRecord(np.zeros((h, w, 3)), np.zeros((h, w, 3)), np.zeros((h, w), bool),
                      np.ones((h, w)), np.zeros((h, w, 1)), K=K, pose=P or SE3Pose())


def one_splat(z=2.0, w=(1.0, 0.5, 0.25)):
    return SplatSet([[0.0, 0.0, z]], [[1, 0, 0, 0]], [[0.1, 0.1, 0.1]], [w])


def test_empty_renders_background():
    img = render_reflectance(SplatSet.empty(), blank_view(), RenderConfig(background=(0.1, 0.2, 0.3)))
    assert np.allclose(img, [0.1, 0.2, 0.3])


def test_single_splat_peak_at_center():
    img = render_reflectance(one_splat(), blank_view())
    r, c = np.unravel_index(np.argmax(img[..., 0]), img.shape[:2])
    assert abs(c - 7.5) <= 0.5 and abs(r - 5.5) <= 0.5
    assert img[..., 0].max() <= 1.0


def test_behind_camera_is_culled():
    assert np.all(render_reflectance(one_splat(z=-2.0), blank_view()) == 0)


def test_matches_oracle_with_background():
    rng = np.random.default_rng(0)
    s = SplatSet(rng.normal(scale=0.3, size=(6, 3)) + [0, 0, 2.5], rng.normal(size=(6, 4)),
                 rng.uniform(0.02, 0.3, (6, 3)), rng.random((6, 3)))
    cfg = RenderConfig(background=(0.05, 0.0, 0.1))
    P = SE3Pose(np.array([0.99, 0.05, -0.02, 0.03]), np.array([0.1, -0.1, 0.2]))
    got = render_reflectance(s, blank_view(P), cfg)
    want = naive_render(s.means, s.quats, s.scales, s.weights, K, P, (12, 16), bg=cfg.background)
    assert np.abs(got - want).max() < 1e-12


def test_neutral_light_leaves_reflectance():
    R = np.random.default_rng(1).random((12, 16, 3))
    out = compose(R, SHLight.neutral(2), K=K)
    assert np.allclose(out.composed, R) and np.allclose(out.illumination, 1.0)


def test_train_reduces_loss_and_shared_light():
    v = blank_view()
    target = render_reflectance(one_splat(w=(0.8, 0.4, 0.2)), v)
    v = v.with_(image=target)
    mask = np.ones(v.shape, bool)
    start = one_splat(w=(0.3, 0.3, 0.3))
    res = train(start, [v, v], [SHLight.neutral(1)], [mask, mask], RenderConfig(train_iters=60))
    assert len(res.lights) == 1
    assert res.trace[-1] < 0.2 * res.trace[0]
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


def test_fully_masked_raises():
    v = blank_view()
    with pytest.raises(ValueError):
        photometric_loss(one_splat(), [v], [SHLight.neutral(0)], [np.zeros(v.shape, bool)])
