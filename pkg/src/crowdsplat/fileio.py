"""On-disk formats: CSSP float grids, 8-bit images, masks.

CSSP grid layout (little-endian)::

    bytes 0-3    magic b"CSSP"
    bytes 4-7    u32 height
    bytes 8-11   u32 width
    bytes 12-15  u32 channels
    bytes 16-    float32 data, row-major, channels interleaved

Invalid point-map entries are stored as NaN.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoError

MAGIC = b"CSSP"


def write_grid(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<III", h, w, c))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def read_grid(path: str | Path, channels: int | None = None) -> np.ndarray:
    """Read a CSSP grid as float64 ``(H, W, C)``; ``C == 1`` is squeezed."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise IoError(f"{path} is not a CSSP grid (bad magic)")
    h, w, c = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * h * w * c:
        raise IoError(f"{path}: payload size does not match header {h}x{w}x{c}")
    if channels is not None and c != channels:
        raise IoError(f"{path}: expected {channels} channels, header says {c}")
    arr = np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, c).astype(np.float64)
    return arr[..., 0] if c == 1 else arr


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit PNG or PPM (chosen by suffix), clamping."""
    path = Path(path)
    arr = to_uint8(img)
    try:
        if path.suffix.lower() in (".ppm", ".pgm"):
            mode = "P6" if arr.ndim == 3 else "P5"
            h, w = arr.shape[:2]
            path.write_bytes(f"{mode}\n{w} {h}\n255\n".encode() + arr.tobytes())
        else:
            Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise IoError(f"cannot read image {path}: {exc}") from exc
    return arr


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """1-bit PNG, or binary PGM with 0/255 values for a ``.pgm`` suffix."""
    path = Path(path)
    mask = np.asarray(mask, dtype=bool)
    try:
        if path.suffix.lower() == ".pgm":
            h, w = mask.shape
            path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + (mask.astype(np.uint8) * 255).tobytes())
        else:
            Image.fromarray(mask).convert("1").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127
