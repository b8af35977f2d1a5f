"""Flat ``key=value`` pipeline configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .align import AlignConfig
from .errors import ConfigError, IoError
from .illum import MAX_ORDER
from .render import RenderConfig
from .synth import NoiseModel


@dataclass(frozen=True)
class PipelineConfig:
    # synth
    seed: int = 7
    n_splats: int = 200
    n_views: int = 4
    width: int = 64
    height: int = 48
    focal: float = 130.0
    synth_sh_order: int = 4
    n_anchors: int = 50_000
    descriptor_scale: float = 0.2
    point_sigma: float = 0.0
    occluder_count: int = 0
    # matching
    match_stride: int = 2
    match_max_dist: float = 0.4
    # align
    lam: float = 100.0
    coarse_iters: int = 300
    fine_iters: int = 300
    step_size: float = 1e-2
    convergence_tol: float = 1e-9
    rot_param: str = "unit_quaternion"
    final_lr: float = 1.0
    point_step: float = 1.0
    # mask
    otsu: bool = False
    threshold: float = 0.2
    otsu_bins: int = 256
    # ginit
    init_stride: int = 2
    init_conf_threshold: float = 0.0
    # render
    sh_order: int = MAX_ORDER
    cutoff_sigmas: float = 3.0
    train_iters: int = 1000
    lr_weight: float = 1e-2
    lr_mean: float = 1e-4
    lr_scale: float = 1e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 1e-2

    def __post_init__(self):
        try:
            self.align_config()
            self.render_config()
            self.noise()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("n_splats", "n_views", "width", "height", "n_anchors", "match_stride",
                    "otsu_bins", "init_stride"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.n_views < 2:
            raise ConfigError("n_views must be >= 2")
        if self.focal <= 0 or self.descriptor_scale <= 0 or self.match_max_dist <= 0:
            raise ConfigError("focal, descriptor_scale and match_max_dist must be positive")
        if not 0 <= self.sh_order <= MAX_ORDER:
            raise ConfigError(f"sh_order must be in [0, {MAX_ORDER}]")
        if not 0 <= self.synth_sh_order <= 4:
            raise ConfigError("synth_sh_order must be in [0, 4]")

    def align_config(self) -> AlignConfig:
        return AlignConfig(lam=self.lam, coarse_iters=self.coarse_iters, fine_iters=self.fine_iters,
                           step_size=self.step_size, convergence_tol=self.convergence_tol,
                           rot_param=self.rot_param, final_lr=self.final_lr, point_step=self.point_step)

    def render_config(self) -> RenderConfig:
        return RenderConfig(cutoff_sigmas=self.cutoff_sigmas, train_iters=self.train_iters,
                            lr_weight=self.lr_weight, lr_mean=self.lr_mean, lr_scale=self.lr_scale,
                            lr_rotation=self.lr_rotation, lr_sh=self.lr_sh)

    def noise(self) -> NoiseModel:
        return NoiseModel(point_sigma=self.point_sigma, occluder_count=self.occluder_count)

    def with_(self, **kw) -> "PipelineConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        return replace(self, **kw)

    # -- text form -------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        return cls(**cls.parse_items(text))

    @classmethod
    def parse_items(cls, text: str) -> dict:
        """Typed values of the ``key=value`` lines in ``text``; comments start with ``#``."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown config key {key!r} (line {n})")
            values[key] = _parse(key, val, types[key])
        return values

    def save(self, path: str | Path) -> None:
        try:
            Path(path).write_text(self.to_text())
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc.strerror}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_text(text)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, val: str, typ: str):
    try:
        if typ == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {typ}") from None
