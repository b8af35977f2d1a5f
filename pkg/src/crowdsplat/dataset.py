"""Dataset directory layout and stage artifacts on disk.

A dataset directory holds ``manifest.json`` plus, per view ``NAME``::

    NAME.png               8-bit RGB image
    NAME.pointmap.f32      CSSP grid, 3 channels, NaN where invalid
    NAME.confidence.f32    CSSP grid, 1 channel
    NAME.features.f32      CSSP grid, D channels

Synthetic datasets add a ``gt/`` sidecar with true cameras, lights, clean
renders, occluder footprints and correspondences.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import IoError, MissingStageOutput
from .fileio import read_grid, read_image, read_mask, write_grid, write_image, write_mask
from .geom import Intrinsics, SE3Pose
from .illum import SHLight
from .matching import MatchSet
from .views import ViewRecord

MANIFEST = "manifest.json"
FORMAT = "css-dataset"


def _dump_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def _load_json(path: Path, stage: str | None = None):
    if not path.exists():
        if stage is not None:
            raise MissingStageOutput(f"missing {path} (run `css {stage}` first)")
        raise IoError(f"missing {path}")
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create directory {path}: {exc.strerror}") from exc
    return path


# --------------------------------------------------------------------------
# cameras
# --------------------------------------------------------------------------

def camera_to_dict(K: Intrinsics | None, P: SE3Pose | None) -> dict:
    out = {}
    if K is not None:
        out["intrinsics"] = [float(x) for x in K.as_array()]
    if P is not None:
        out["rotation"] = [float(x) for x in P.rotation]
        out["translation"] = [float(x) for x in P.translation]
    return out


def camera_from_dict(d: dict, width: int, height: int) -> tuple[Intrinsics | None, SE3Pose | None]:
    K = Intrinsics.from_array(d["intrinsics"], width, height) if "intrinsics" in d else None
    P = SE3Pose(np.array(d["rotation"]), np.array(d["translation"])) if "rotation" in d else None
    return K, P


def save_cameras(path: Path, views: list[ViewRecord]) -> None:
    _dump_json(path, {v.name: camera_to_dict(v.K, v.pose) for v in views})


def load_cameras(path: Path, views: list[ViewRecord], stage: str) -> list[ViewRecord]:
    cams = _load_json(path, stage)
    out = []
    for v in views:
        if v.name not in cams:
            raise MissingStageOutput(f"{path} has no camera for view {v.name!r}")
        h, w = v.shape
        K, P = camera_from_dict(cams[v.name], w, h)
        out.append(v.with_(K=K, pose=P))
    return out


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------

def write_dataset(root: str | Path, views: list[ViewRecord]) -> None:
    root = ensure_dir(root)
    entries = []
    for v in views:
        e = {"name": v.name, "image": f"{v.name}.png", "pointmap": f"{v.name}.pointmap.f32",
             "confidence": f"{v.name}.confidence.f32", "features": f"{v.name}.features.f32"}
        if v.K_init is not None:
            e["intrinsics"] = [float(x) for x in v.K_init.as_array()]
        write_image(root / e["image"], v.image)
        write_grid(root / e["pointmap"], np.where(v.valid[..., None], v.points, np.nan))
        write_grid(root / e["confidence"], v.confidence)
        write_grid(root / e["features"], v.features)
        entries.append(e)
    _dump_json(root / MANIFEST, {"format": FORMAT, "version": 1, "views": entries})


def read_dataset(root: str | Path) -> list[ViewRecord]:
    root = Path(root)
    man = _load_json(root / MANIFEST)
    if man.get("format") != FORMAT:
        raise IoError(f"{root / MANIFEST} is not a {FORMAT} manifest")
    views = []
    for e in man["views"]:
        for key in ("image", "pointmap", "confidence", "features"):
            if not (root / e[key]).exists():
                raise IoError(f"manifest references missing file {root / e[key]}")
        image = read_image(root / e["image"])
        pts = read_grid(root / e["pointmap"], channels=3)
        conf = read_grid(root / e["confidence"], channels=1)
        feats = read_grid(root / e["features"])
        if feats.ndim == 2:
            feats = feats[..., None]
        h, w = image.shape[:2]
        for label, arr in (("pointmap", pts), ("confidence", conf), ("features", feats)):
            if arr.shape[:2] != (h, w):
                raise IoError(f"view {e['name']}: {label} is {arr.shape[:2]}, image is {(h, w)}")
        valid = np.isfinite(pts).all(-1)
        K0 = Intrinsics.from_array(e["intrinsics"], w, h) if "intrinsics" in e else None
        views.append(ViewRecord(image, np.where(valid[..., None], pts, 0.0), valid,
                                np.where(valid, np.nan_to_num(conf), 0.0), feats,
                                name=e["name"], K_init=K0))
    return views


# --------------------------------------------------------------------------
# ground-truth sidecar
# --------------------------------------------------------------------------

def write_ground_truth(root: str | Path, views, cams, lights, clean, occluders,
                       matches: dict[tuple[int, int], MatchSet], splats) -> None:
    gt = ensure_dir(Path(root) / "gt")
    _dump_json(gt / "cameras.json", {v.name: camera_to_dict(K, P) for v, (K, P) in zip(views, cams)})
    for v, light, img, occ in zip(views, lights, clean, occluders):
        light.save(gt / f"{v.name}.sh")
        write_grid(gt / f"{v.name}.clean.f32", img)
        write_image(gt / f"{v.name}.clean.png", img)
        write_mask(gt / f"{v.name}.occluder.png", occ)
    _dump_json(gt / "matches.json", {
        f"{i}_{j}": np.concatenate([m.pix_a, m.pix_b, m.weights[:, None]], 1).tolist()
        for (i, j), m in sorted(matches.items())})
    splats.save_ply(gt / "splats.ply")


def read_ground_truth(root: str | Path, views: list[ViewRecord]) -> dict:
    gt = Path(root) / "gt"
    if not gt.is_dir():
        raise MissingStageOutput(f"{root} has no gt/ sidecar (not a synthetic dataset?)")
    gviews = load_cameras(gt / "cameras.json", views, "synth")
    raw = _load_json(gt / "matches.json", "synth")
    matches = {}
    for key, rows in raw.items():
        i, j = (int(s) for s in key.split("_"))
        a = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
        matches[(i, j)] = MatchSet(a[:, 0:2], a[:, 2:4], a[:, 4])
    return {
        "poses": [v.pose for v in gviews],
        "intrinsics": [v.K for v in gviews],
        "lights": [SHLight.load(gt / f"{v.name}.sh") for v in views],
        "clean": [read_grid(gt / f"{v.name}.clean.f32", channels=3) for v in views],
        "occluders": [read_mask(gt / f"{v.name}.occluder.png") for v in views],
        "matches": matches,
    }


def require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStageOutput(f"missing {path} (run `css {stage}` first)")
    return path
