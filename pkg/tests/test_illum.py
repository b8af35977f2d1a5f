import numpy as np
import pytest

from crowdsplat.errors import IndexOutOfRange
from crowdsplat.illum import (
    MAX_ORDER,
    SHLight,
    bake,
    eval_illum,
    fit_coeffs,
    n_coeffs,
    sh_basis,
    sh_basis_all,
)


def test_neutral_light_is_one():
    th, ph = np.random.default_rng(0).uniform([0, -np.pi], [np.pi, np.pi], (100, 2)).T
    assert np.allclose(eval_illum(SHLight.neutral(3), th, ph), 1.0)


def test_basis_index_range():
    for l, m in ((-1, 0), (MAX_ORDER + 1, 0), (2, 3), (2, -3)):
        with pytest.raises(IndexOutOfRange):
            sh_basis(l, m, 0.3, 0.2)


def test_basis_all_matches_single():
    th, ph = np.array([0.3, 1.2, 2.9]), np.array([-2.0, 0.1, 1.5])
    B = sh_basis_all(4, th, ph)
    assert B.shape == (3, n_coeffs(4))
    for l in range(5):
        for m in range(-l, l + 1):
            assert np.allclose(B[:, l * l + l + m], sh_basis(l, m, th, ph))


def test_y00_constant():
    assert np.isclose(sh_basis(0, 0, 1.0, 2.0), 0.5 / np.sqrt(np.pi))


def test_bake_lookup_at_centers():
    rng = np.random.default_rng(1)
    light = SHLight(2, rng.normal(size=(9, 3)))
    env = bake(light, (8, 16))
    th = (np.arange(8) + 0.5) * np.pi / 8
    ph = (np.arange(16) + 0.5) * 2 * np.pi / 16 - np.pi
    tt, pp = np.meshgrid(th, ph, indexing="ij")
    assert np.allclose(env.lookup(tt, pp), eval_illum(light, tt, pp))
    assert np.allclose(env.lookup(th[3], np.pi + 1e-9), env.lookup(th[3], -np.pi + 1e-9))


def test_save_load(tmp_path):
    rng = np.random.default_rng(2)
    light = SHLight(3, rng.normal(size=(16, 3)))
    light.save(tmp_path / "l.sh")
    assert np.array_equal(SHLight.load(tmp_path / "l.sh").coeffs, light.coeffs)
    env = bake(light, (4, 8))
    env.save_raw(tmp_path / "e.raw")
    assert np.allclose(type(env).load_raw(tmp_path / "e.raw").values, env.values, rtol=1e-6)


def test_invalid_light():
    with pytest.raises(ValueError):
        SHLight(MAX_ORDER + 1, np.zeros((n_coeffs(MAX_ORDER + 1), 3)))
    with pytest.raises(ValueError):
        SHLight(0, [[np.nan, 0, 0]])


def test_fit_coeffs_recovers_light():
    rng = np.random.default_rng(3)
    true = SHLight(1, rng.normal(scale=0.5, size=(4, 3)))
    th, ph = rng.uniform([0, -np.pi], [np.pi, np.pi], (400, 2)).T
    rad = eval_illum(true, th, ph)
    fit, trace = fit_coeffs(SHLight.zeros(1), np.column_stack([th, ph, rad]), iters=3000)
    assert trace[-1] < trace[0]
    assert trace[-1] < 1e-5
    assert all(b <= a for a, b in zip(trace, trace[1:]))
