"""Command-line entry points: train, render, eval, info (plus an oracle-scene exporter).

Run configs are plain ``key = value`` files; ``#`` starts a comment. Every
``TrainConfig`` field is a valid key, ranks are given as ``density_ranks``
and ``appearance_ranks`` (``8`` or ``4,4,16``), and ``data``, ``preset``,
``out``, ``split`` and ``downscale`` describe the run. Unknown keys are errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import DatasetError, export_scene, load_nerf_synthetic, make_oracle_scene, save_png
from .renderer import Camera, RenderOptions, generate_rays, render_rays, step_size_for
from .tensor_field import dense_parameter_count, parameter_count
from .trainer import PRESETS, RankConfig, TrainConfig, evaluate, preset, train

log = logging.getLogger("factorfield")

THREADS_ENV = "FACTORFIELD_THREADS"
RUN_KEYS = ("data", "preset", "out", "split", "downscale")
RANK_KEYS = ("density_ranks", "appearance_ranks")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str
    out: str = "run"
    preset: str | None = None
    split: str = "train"
    downscale: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)


def _train_fields():
    return {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "ranks"}


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in text.replace(" ", "").split(",") if t]
            cast = float if default and isinstance(default[0], float) else int
            return tuple(cast(t) for t in items)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_run_config(text, source="<config>") -> RunConfig:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in pairs:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        pairs[k] = v
    tf = _train_fields()
    unknown = [k for k in pairs if k not in tf and k not in RUN_KEYS and k not in RANK_KEYS]
    if unknown:
        raise ConfigError(f"{source}: unknown config key(s): {', '.join(unknown)}")
    if "data" not in pairs:
        raise ConfigError(f"{source}: missing required key 'data' (dataset path)")
    name = pairs.get("preset")
    if name is not None and name not in PRESETS:
        raise ConfigError(f"{source}: unknown preset {name!r}; available: {', '.join(PRESETS)}")
    base = preset(name) if name else TrainConfig()
    kw = {}
    for k, v in pairs.items():
        if k in tf:
            kw[k] = _parse_value(k, v, getattr(base, k))
    ranks = base.ranks
    if any(k in pairs for k in RANK_KEYS):
        d = _parse_value("density_ranks", pairs.get("density_ranks", ""), (1,)) or ranks.density
        a = _parse_value("appearance_ranks", pairs.get("appearance_ranks", ""), (1,)) or ranks.appearance
        ranks = RankConfig(d[0] if len(d) == 1 else d, a[0] if len(a) == 1 else a)
    try:
        cfg = dataclasses.replace(base, ranks=ranks, **kw)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e
    return RunConfig(pairs["data"], pairs.get("out", "run"), name, pairs.get("split", "train"),
                     int(_parse_value("downscale", pairs.get("downscale", "1"), 1)), cfg)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    return parse_run_config(path.read_text(), str(path))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_run_config(rc: RunConfig) -> str:
    lines = [f"data = {rc.data}", f"out = {rc.out}", f"split = {rc.split}", f"downscale = {rc.downscale}"]
    if rc.preset:
        lines.append(f"preset = {rc.preset}")
    lines.append(f"density_ranks = {_fmt(rc.train.ranks.density)}")
    lines.append(f"appearance_ranks = {_fmt(rc.train.ranks.appearance)}")
    for name in _train_fields():
        lines.append(f"{name} = {_fmt(getattr(rc.train, name))}")
    return "\n".join(lines) + "\n"


def _set_threads():
    n = os.environ.get(THREADS_ENV)
    if n:
        import numba
        numba.set_num_threads(int(n))


def _render_extra(cfg: TrainConfig, background):
    return {"max_samples": cfg.max_samples, "samples_per_voxel": cfg.samples_per_voxel,
            "background": [float(x) for x in background]}


def _ckpt_step(model, extra):
    extra = extra or {}
    g = model.geometry
    return step_size_for(g.lo, g.hi, g.resolution, extra.get("max_samples", 1024),
                         extra.get("samples_per_voxel", 2.0))


def cmd_train(args):
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.train.seed = args.seed
    if args.deterministic:
        rc.train.deterministic = True
    if args.out:
        rc.out = args.out
    scene = load_nerf_synthetic(rc.data, rc.split, rc.downscale)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_run_config(rc))
    res = train(scene, rc.train, trace_path=out / "trace.jsonl",
                progress=lambda r: log.info("step %d loss %.5f psnr %.2f", r.step, r.loss, r.psnr))
    checkpoint.save(out / "model.trfc", res.model, res.occupancy, _render_extra(rc.train, scene.background))
    print(f"wrote {out / 'model.trfc'}")
    return 0


def _load_poses(path):
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
        angle = float(meta["camera_angle_x"])
        poses = [np.asarray(f["transform_matrix"], dtype=np.float64) for f in meta["frames"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"{path}: cannot read poses ({e})") from e
    return angle, poses


def render_depth_image(depth, acc):
    fg = acc > 1e-3
    img = np.zeros_like(depth)
    if fg.any():
        d = depth[fg] / acc[fg]
        lo, hi = d.min(), d.max()
        img[fg] = 1.0 if hi - lo < 1e-12 else (d - lo) / (hi - lo)
    return img


def cmd_render(args):
    model, occ, extra = checkpoint.load(args.checkpoint)
    angle, poses = _load_poses(args.poses)
    step = _ckpt_step(model, extra)
    bg = np.asarray((extra or {}).get("background", (1.0, 1.0, 1.0)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = args.mode or "rgb"
    if mode not in ("rgb", "depth"):
        raise ValueError(f"render mode must be rgb or depth, got {mode!r}")
    for i, pose in enumerate(poses):
        cam = Camera.from_fov(args.width, args.height or args.width, angle, pose)
        o, d = generate_rays(cam)
        res = render_rays(model, o, d, RenderOptions(step=step), bg, occ)
        shape = (cam.height, cam.width)
        if mode == "rgb":
            save_png(out / f"{i:03d}.png", res["rgb"].reshape(shape + (3,)))
        else:
            img = render_depth_image(res["depth"], res["acc"]).reshape(shape)
            save_png(out / f"{i:03d}.png", np.repeat(img[..., None], 3, axis=-1))
    print(f"rendered {len(poses)} view(s) to {out}")
    return 0


def cmd_eval(args):
    model, occ, extra = checkpoint.load(args.checkpoint)
    scene = load_nerf_synthetic(args.data, args.split)
    res = evaluate(model, scene, _ckpt_step(model, extra), occ)
    rows = [{"view": i, "path": fr.path, "psnr": p, "ssim": s}
            for i, (fr, p, s) in enumerate(zip(scene.frames, res["psnr"], res["ssim"]))]
    for r in rows:
        print(f"view {r['view']:3d}  PSNR {r['psnr']:7.3f}  SSIM {r['ssim']:.4f}")
    summary = {"mean_psnr": float(np.mean(res["psnr"])), "mean_ssim": float(np.mean(res["ssim"])), "views": rows}
    print(f"mean  PSNR {summary['mean_psnr']:7.3f}  SSIM {summary['mean_ssim']:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2))
    return 0


def info_report(model, byte_size=None):
    n = parameter_count(model.density, model.appearance)
    res = model.geometry.resolution
    dense = dense_parameter_count(res, model.appearance.n_features)
    rep = {
        "mode": model.mode,
        "decoder": model.decoder.kind,
        "density_ranks": list(model.density.ranks),
        "appearance_ranks": list(model.appearance.ranks),
        "resolution": list(res),
        "parameters": int(n),
        "dense_parameters": int(dense),
        "compression_percent": 100.0 * n / dense,
    }
    if byte_size is not None:
        rep["bytes"] = int(byte_size)
    return rep


def cmd_info(args):
    model, _, _ = checkpoint.load(args.checkpoint)
    rep = info_report(model, os.path.getsize(args.checkpoint))
    for k, v in rep.items():
        print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return 0


def cmd_oracle(args):
    scene = make_oracle_scene(args.kind, args.seed or 0, width=args.width)
    export_scene(scene, args.out)
    print(f"wrote oracle scene {args.kind!r} to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="factorfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="reconstruct a scene from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--poses", required=True, help="transforms_*.json with camera_angle_x and frames")
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("rgb", "depth"), default="rgb")
    r.add_argument("--width", type=int, default=800)
    r.add_argument("--height", type=int)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="results JSON path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("info", help="parameter count and compression of a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_info)

    o = sub.add_parser("oracle", help="export an analytic oracle scene in the synthetic layout")
    o.add_argument("--kind", default="sphere", choices=("sphere", "two-blobs", "checker-cube"))
    o.add_argument("--out", required=True)
    o.add_argument("--seed", type=int)
    o.add_argument("--width", type=int, default=200)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    _set_threads()
    try:
        return args.func(args)
    except (ConfigError, DatasetError, checkpoint.CheckpointError, ValueError, RuntimeError,
            FloatingPointError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
