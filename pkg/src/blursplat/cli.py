"""Command-line entry point: ``blursplat {synth,train,render,eval}``.

Exit status is 0 on success, 2 on a usage error and 1 on any runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config
from .data import SynthConfig, generate_synthetic, load_dataset, read_intrinsics, read_poses
from .errors import BlurSplatError
from .metrics import error_map, load_image, psnr, save_image, ssim
from .rasterizer import render, threads_from_env
from .scene import load_scene
from .train import TrainConfig, run_training

log = logging.getLogger("blursplat")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blursplat", description="Gaussian splatting from motion-blurred images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic blurred dataset")
    s.add_argument("--config", type=Path, help="key = value file with SynthConfig fields")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--config", type=Path, help="key = value file with TrainConfig fields")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--aggregation", choices=("max", "mean", "topk"))
    t.add_argument("--fixed-threshold", action="store_true", help="plain constant densification threshold")
    t.add_argument("--stage1-only", action="store_true", help="skip the rigid-transform stage")
    t.add_argument("--naive", action="store_true", help="no blur model: one sharp render per image")
    t.add_argument("--scheme", help="trajectory scheme: linear, spline[:k] or bezier[:k]")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    r = sub.add_parser("render", help="render a checkpoint from a list of poses")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--pose-file", type=Path, required=True, help="lines 'name qw qx qy qz tx ty tz'")
    r.add_argument("--intrinsics", type=Path, help="defaults to intrinsics.txt beside the checkpoint")
    r.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="score renders against reference images")
    e.add_argument("--renders", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--error-maps", type=Path, help="also write colour-coded error maps here")
    return p


def _overrides(pairs: list[str], parser: argparse.ArgumentParser) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_synth(args, parser) -> int:
    values = config.read_kv(args.config) if args.config else {}
    values.update(_overrides(args.set, parser))
    cfg = config.apply(SynthConfig(), values)
    ds = generate_synthetic(cfg, args.out)
    (args.out / "synth_config.txt").write_text("\n".join(config.dump(cfg)) + "\n")
    print(f"wrote {len(ds.train)} training and {len(ds.test)} test views to {args.out}")
    return 0


def cmd_train(args, parser) -> int:
    values = config.read_kv(args.config) if args.config else {}
    if args.aggregation:
        values["aggregation"] = args.aggregation
    if args.fixed_threshold:
        values["densify.fixed"] = "true"
    if args.stage1_only:
        values["stage1_only"] = "true"
    if args.naive:
        values["naive"] = "true"
    if args.scheme:
        values["scheme"] = args.scheme
    if args.iterations is not None:
        values["iterations"] = str(args.iterations)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    values.update(_overrides(args.set, parser))
    cfg = config.apply(TrainConfig(), values)
    ds = load_dataset(args.data)
    result = run_training(ds, cfg, args.out)
    msg = f"trained {cfg.iterations} iterations, {len(result.state.scene)} primitives"
    if result.evaluation and np.isfinite(result.test_psnr):
        msg += f", test PSNR {result.test_psnr:.2f} dB"
    print(msg)
    return 0


def cmd_render(args, parser) -> int:
    scene = load_scene(args.checkpoint)
    K = read_intrinsics(args.intrinsics or args.checkpoint.parent / "intrinsics.txt")
    poses = read_poses(args.pose_file)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, pose in poses.items():
        img, _ = render(scene, pose, K)
        save_image(img, args.out / (name if name.lower().endswith(".png") else name + ".png"))
    print(f"rendered {len(poses)} views to {args.out}")
    return 0


def cmd_eval(args, parser) -> int:
    gt_files = sorted(p for p in args.gt.iterdir() if p.suffix.lower() == ".png")
    if not gt_files:
        raise FileNotFoundError(f"no PNG images in {args.gt}")
    rows = []
    for gt_path in gt_files:
        render_path = args.renders / gt_path.name
        if not render_path.exists():
            raise FileNotFoundError(f"no render for {gt_path.name} in {args.renders}")
        a, b = load_image(render_path), load_image(gt_path)
        rows.append((gt_path.name, psnr(a, b), ssim(a, b)))
        if args.error_maps:
            args.error_maps.mkdir(parents=True, exist_ok=True)
            save_image(error_map(a, b), args.error_maps / gt_path.name)
    args.report.parent.mkdir(parents=True, exist_ok=True)
    with open(args.report, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("image", "psnr", "ssim"))
        for name, p, s in rows:
            w.writerow((name, f"{p:.6f}", f"{s:.6f}"))
        w.writerow(("mean", f"{np.mean([r[1] for r in rows]):.6f}", f"{np.mean([r[2] for r in rows]):.6f}"))
    print(f"scored {len(rows)} images, mean PSNR {np.mean([r[1] for r in rows]):.2f} dB")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        threads_from_env()
        return COMMANDS[args.command](args, parser)
    except SystemExit as exc:  # parser.error inside a command
        return int(exc.code or 0)
    except (BlurSplatError, OSError, ValueError, KeyError) as exc:
        print(f"blursplat: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
