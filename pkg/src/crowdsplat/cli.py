"""``css`` command-line entry point.

Every stage reads the dataset directory and writes under ``--out``::

    css synth  --out DATA
    css align  DATA --out RUN      # RUN/align/cameras.json, NAME.points.f32
    css init   DATA --out RUN      # RUN/init/splats.ply, NAME.mask.png
    css train  DATA --out RUN      # RUN/train/splats.ply, NAME.sh
    css render DATA --out RUN      # RUN/render/NAME.png (+ .f32)
    css eval   DATA --out RUN      # RUN/eval/report.{txt,json}
    css ablate DATA --out RUN      # RUN/ablate/report.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import dataset as ds
from . import pipeline as pl
from .config import PipelineConfig
from .errors import ConfigError, CSSError, DivergedLoss, IoError, MissingStageOutput
from .fileio import read_grid, read_mask, write_grid, write_image, write_mask
from .ginit import SplatSet
from .illum import SHLight
from .synth import gen_scene, gen_views

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_IO = 4
EXIT_DIVERGED = 5

LOCKFILE = ".css.lock"

logger = logging.getLogger("crowdsplat")


# --------------------------------------------------------------------------
# config resolution
# --------------------------------------------------------------------------

def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.otsu:
        over["otsu"] = True
    if args.threshold is not None:
        over["threshold"] = args.threshold
        over["otsu"] = False
    if args.lam is not None:
        over["lam"] = args.lam
    if args.sh_order is not None:
        over["sh_order"] = args.sh_order
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over.update(PipelineConfig.parse_items(item))
    return cfg.with_(**over) if over else cfg


# --------------------------------------------------------------------------
# stage helpers
# --------------------------------------------------------------------------

def _aligned_views(data: Path, run: Path):
    views = ds.read_dataset(data)
    views = ds.load_cameras(run / "align" / "cameras.json", views, "align")
    out = []
    for v in views:
        path = ds.require(run / "align" / f"{v.name}.points.f32", "align")
        pts = read_grid(path, channels=3)
        out.append(v.with_(points_opt=np.where(v.valid[..., None], np.nan_to_num(pts), 0.0)))
    return out


def _masks(run: Path, views):
    return [read_mask(ds.require(run / "init" / f"{v.name}.mask.png", "init")) for v in views]


def _trained(run: Path, views):
    splats = SplatSet.load_ply(ds.require(run / "train" / "splats.ply", "train"))
    lights = [SHLight.load(ds.require(run / "train" / f"{v.name}.sh", "train")) for v in views]
    return splats, lights


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = ds.ensure_dir(args.out)
    scene = gen_scene(cfg.seed, n_splats=cfg.n_splats, n_views=cfg.n_views, width=cfg.width,
                      height=cfg.height, focal=cfg.focal, sh_order=cfg.synth_sh_order,
                      n_anchors=cfg.n_anchors, descriptor_scale=cfg.descriptor_scale)
    data = gen_views(scene, cfg.noise(), stride=cfg.match_stride)
    ds.write_dataset(out, data.views)
    ds.write_ground_truth(out, data.views, list(zip(scene.intrinsics, scene.poses)), scene.lights,
                          data.clean, data.occluders, data.matches, scene.splats)
    cfg.save(out / "synth_config.txt")
    print(f"synth: wrote {len(data.views)} views to {out}")
    return EXIT_OK


def cmd_align(args, cfg: PipelineConfig) -> int:
    run = ds.ensure_dir(Path(args.out) / "align")
    views = ds.read_dataset(args.dataset)
    aligned, trace = pl.align_views(views, cfg, trace_path=run / "trace.jsonl")
    ds.save_cameras(run / "cameras.json", aligned)
    for v in aligned:
        write_grid(run / f"{v.name}.points.f32", np.where(v.valid[..., None], v.points_opt, np.nan))
    last = trace[-1]
    print(f"align: l_d={last.l_d:.6g} l_c={last.l_c:.6g} l_f={last.l_f:.6g}")
    return EXIT_OK


def cmd_init(args, cfg: PipelineConfig) -> int:
    run = Path(args.out)
    views = _aligned_views(Path(args.dataset), run)
    masks = pl.confidence_masks(views, cfg)
    splats = pl.init_stage(views, masks, cfg)
    out = ds.ensure_dir(run / "init")
    for v, m in zip(views, masks):
        write_mask(out / f"{v.name}.mask.png", m)
    splats.save_ply(out / "splats.ply")
    print(f"init: {len(splats)} splats")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    run = Path(args.out)
    views = _aligned_views(Path(args.dataset), run)
    splats = SplatSet.load_ply(ds.require(run / "init" / "splats.ply", "init"))
    masks = _masks(run, views)
    out = ds.ensure_dir(run / "train")
    splats, lights, trace = pl.train_stage(splats, views, masks, cfg, trace_path=out / "trace.jsonl")
    splats.save_ply(out / "splats.ply")
    for v, light in zip(views, lights):
        light.save(out / f"{v.name}.sh")
    print(f"train: loss {trace[0]:.6g} -> {trace[-1]:.6g}")
    return EXIT_OK


def cmd_render(args, cfg: PipelineConfig) -> int:
    run = Path(args.out)
    views = _aligned_views(Path(args.dataset), run)
    splats, lights = _trained(run, views)
    out = ds.ensure_dir(run / "render")
    names = [v.name for v in views]
    if args.between:
        a, b = (_view_index(names, n) for n in args.between)
        va, vb = views[a], views[b]
        pose = pl.interpolate_pose(va.pose, vb.pose, args.frac)
        light = SHLight(lights[a].order, (1 - args.frac) * lights[a].coeffs + args.frac * lights[b].coeffs)
        # novel views have no point map, only the pixel rays of the first camera
        novel = va.with_(pose=pose, points_opt=None, valid=np.zeros(va.shape, dtype=bool))
        img = pl.render_views(splats, [novel], [light], cfg)[0]
        path = out / f"novel_{names[a]}_{names[b]}_{args.frac:g}.png"
        write_image(path, img)
        print(f"render: wrote {path}")
        return EXIT_OK
    idx = [_view_index(names, args.view)] if args.view else range(len(views))
    for k in idx:
        img = pl.render_views(splats, [views[k]], [lights[k]], cfg)[0]
        write_image(out / f"{names[k]}.png", img)
        write_grid(out / f"{names[k]}.f32", img)
    print(f"render: wrote {len(idx)} views to {out}")
    return EXIT_OK


def _view_index(names: list[str], name: str) -> int:
    if name in names:
        return names.index(name)
    if name.isdigit() and int(name) < len(names):
        return int(name)
    raise ConfigError(f"no view named {name!r}")


def cmd_eval(args, cfg: PipelineConfig) -> int:
    views = ds.read_dataset(args.dataset)
    gt = ds.read_ground_truth(args.dataset, views)
    run = Path(args.out)
    renders = [read_grid(ds.require(run / "render" / f"{v.name}.f32", "render"), channels=3) for v in views]
    report = pl.evaluate(renders, gt["clean"], [v.name for v in views])
    out = ds.ensure_dir(run / "eval")
    report.save(out / "report")
    print(f"eval: psnr={report.psnr:.3f} ssim={report.ssim:.4f}")
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    views = ds.read_dataset(args.dataset)
    gt = ds.read_ground_truth(args.dataset, views)
    picked = [k for k, flag in (("no_cm", args.no_cm), ("no_ib", args.no_ib)) if flag]
    if len(picked) == 2:
        variants = ("no_cm_ib",)
    elif picked:
        variants = tuple(picked)
    else:
        variants = tuple(pl.VARIANTS)
    result = pl.ablate(views, gt["clean"], cfg, variants)
    out = ds.ensure_dir(Path(args.out) / "ablate")
    table = result.to_dict()
    (out / "report.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
    for name, row in table.items():
        extra = f" delta={row['delta_psnr']:+.3f}" if "delta_psnr" in row else ""
        print(f"ablate: {name:9s} psnr={row['psnr']:.3f} ssim={row['ssim']:.4f}{extra}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "align": cmd_align, "init": cmd_init, "train": cmd_train,
            "render": cmd_render, "eval": cmd_eval, "ablate": cmd_ablate}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--otsu", action="store_true", help="Otsu threshold on each confidence map")
    common.add_argument("--threshold", type=float, help="fixed confidence threshold")
    common.add_argument("--lambda", dest="lam", type=float, help="weight of the coarse loss")
    common.add_argument("--sh-order", dest="sh_order", type=int, help="SH order of the trained lights")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="css", description="Pose-free Gaussian splatting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    for name in ("align", "init", "train", "eval"):
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        p.add_argument("dataset")
    p = sub.add_parser("render", parents=[common], help="render training or interpolated views")
    p.add_argument("dataset")
    p.add_argument("--view", help="render only this view (name or index)")
    p.add_argument("--between", nargs=2, metavar=("A", "B"), help="render a pose between two views")
    p.add_argument("--frac", type=float, default=0.5, help="interpolation fraction for --between")
    p = sub.add_parser("ablate", parents=[common], help="compare against CM/IB ablations")
    p.add_argument("dataset")
    p.add_argument("--no-cm", action="store_true")
    p.add_argument("--no-ib", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = ds.ensure_dir(args.out)
        try:
            with FileLock(str(out / LOCKFILE), timeout=0):
                return COMMANDS[args.command](args, cfg)
        except Timeout:
            raise IoError(f"{out} is locked by another css process") from None
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, exc
    except MissingStageOutput as exc:
        code, msg = EXIT_MISSING, exc
    except IoError as exc:
        code, msg = EXIT_IO, exc
    except DivergedLoss as exc:
        code, msg = EXIT_DIVERGED, exc
    except (CSSError, ValueError) as exc:
        code, msg = EXIT_ERROR, exc
    print(f"css {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
