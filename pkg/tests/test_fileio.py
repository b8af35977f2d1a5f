import numpy as np
import pytest

from crowdsplat.errors import IoError
from crowdsplat.fileio import read_grid, read_image, write_grid, write_image


def test_grid_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in ((5, 4), (5, 4, 3)):
        x = rng.normal(size=shape).astype(np.float32)
        write_grid(tmp_path / "g.f32", x)
        assert np.array_equal(read_grid(tmp_path / "g.f32"), x)


def test_grid_nan_survives(tmp_path):
    x = np.full((2, 2, 3), np.nan)
    write_grid(tmp_path / "g.f32", x)
    assert np.isnan(read_grid(tmp_path / "g.f32")).all()


def test_grid_errors(tmp_path):
    (tmp_path / "bad.f32").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(IoError, match="magic"):
        read_grid(tmp_path / "bad.f32")
    write_grid(tmp_path / "g.f32", np.zeros((2, 2, 3)))
    with pytest.raises(IoError):
        read_grid(tmp_path / "g.f32", channels=1)
    raw = (tmp_path / "g.f32").read_bytes()
    (tmp_path / "t.f32").write_bytes(raw[:-4])
    with pytest.raises(IoError):
        read_grid(tmp_path / "t.f32")
    with pytest.raises(IoError):
        read_grid(tmp_path / "missing.f32")


def test_image_round_trip(tmp_path):
    x = np.random.default_rng(1).integers(0, 256, (6, 5, 3)) / 255.0
    for name in ("i.png", "i.ppm"):
        write_image(tmp_path / name, x)
        assert np.allclose(read_image(tmp_path / name), x)


def test_image_clamps(tmp_path):
    write_image(tmp_path / "i.png", np.array([[[2.0, -1.0, 0.5]]]))
    assert np.allclose(read_image(tmp_path / "i.png"), [[[1.0, 0.0, 128 / 255]]])
