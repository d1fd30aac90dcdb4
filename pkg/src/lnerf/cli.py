"""Command-line entry point: ``lnerf {synth,train,render,eval,bench}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import DomainError, FormatError, ParseError

log = logging.getLogger("lnerf")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lnerf", description="Hybrid grid radiance fields with LiDAR priors.")
    p.add_argument("--config", type=Path, help="run config (section.key = value lines)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--threads", type=int, help="worker threads for BLAS and numba")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="ray-cast a synthetic dataset with simulated LiDAR")
    s.add_argument("spec", type=Path, help="scene spec JSON")
    s.add_argument("out_dir", type=Path)

    t = sub.add_parser("train", help="initialize and train from --config")
    t.add_argument("--pointcloud", type=Path, help="PLY point cloud (default: the dataset's pointcloud.ply)")
    t.add_argument("--no-lidar-init", action="store_true", help="train without the LiDAR geometry prior")

    r = sub.add_parser("render", help="render poses from a checkpoint to PPM + PGM depth")
    r.add_argument("checkpoint", type=Path)
    r.add_argument("poses", type=Path, help="poses.json")
    r.add_argument("out_dir", type=Path)
    r.add_argument("--shift-left", type=float, default=0.0, metavar="METERS",
                   help="translate each camera along its own -x axis before rendering")

    e = sub.add_parser("eval", help="PSNR / SSIM of a checkpoint on a dataset's test split")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("dataset", type=Path)
    e.add_argument("--out", type=Path, help="metrics CSV (default: metrics.csv beside the checkpoint)")
    e.add_argument("--split", default="test")

    sub.add_parser("bench", help="run the ablation variants from --config")
    return p


def _load_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    if getattr(args, "pointcloud", None):
        cfg.set("lidar.pointcloud", str(args.pointcloud.resolve()))
    if getattr(args, "no_lidar_init", False):
        cfg.set("no_lidar_init", True)
    return cfg


def _require_config(args):
    if args.config is None:
        raise DomainError(f"'{args.command}' needs --config")
    cfg = _load_config(args)
    if not cfg["scene.dataset"]:
        raise DomainError("config does not set scene.dataset")
    return cfg


def cmd_synth(args) -> int:
    from .synth import load_scene_spec, synthesize

    summary = synthesize(load_scene_spec(args.spec), args.out_dir)
    print(f"wrote {summary['poses']} poses ({summary['test']} test) and {summary['points']} LiDAR points "
          f"to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import SceneDataset, load_pointcloud, run_training

    cfg = _require_config(args)
    data = SceneDataset.load(cfg.path("scene.dataset"))
    out = cfg.path("scene.out_dir")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps())
    res = run_training(cfg, data, load_pointcloud(cfg, data), log_path=out / "train_log.csv",
                       checkpoint_path=out / "checkpoint.bin", target_psnr=cfg["train.target_psnr"])
    report = {k: res.init_report[k] for k in ("fg_points", "bg_points", "skipped", "shell_points")}
    (out / "init_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"init: {report['fg_points']} fg points, {report['bg_points']} bg points, "
          f"{report['shell_points']} shell points")
    last = res.history[-1] if res.history else None
    if last:
        print(f"trained {len(res.losses)} iterations; test PSNR {last[1]:.2f} dB")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_render(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .geometry import load_poses
    from .imageio import write_pgm16, write_ppm
    from .pipeline import render_image

    state = load_checkpoint(args.checkpoint)
    cams, _ = load_poses(args.poses)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    depth_scale = 65535.0 / state.bounds.bg.diagonal
    for i, cam in enumerate(cams):
        if args.shift_left:
            cam = cam.shifted((-args.shift_left, 0.0, 0.0))
        img, depth, _ = render_image(state, cam)
        write_ppm(args.out_dir / f"{i:04d}.ppm", img)
        write_pgm16(args.out_dir / f"{i:04d}.pgm", np.minimum(depth, state.bounds.bg.diagonal), depth_scale)
    print(f"rendered {len(cams)} views to {args.out_dir}")
    return 0


def format_metrics(rows, mean_psnr: float, mean_ssim: float) -> tuple[str, str]:
    table = ["image      PSNR      SSIM"]
    csv = ["image,psnr,ssim"]
    for i, p, s in rows:
        table.append(f"{i:04d}  {p:8.3f}  {s:8.5f}")
        csv.append(f"{i},{p:.6f},{s:.6f}")
    table.append(f"mean  {mean_psnr:8.3f}  {mean_ssim:8.5f}")
    csv.append(f"mean,{mean_psnr:.6f},{mean_ssim:.6f}")
    return "\n".join(table) + "\n", "\n".join(csv) + "\n"


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .pipeline import SceneDataset, evaluate

    state = load_checkpoint(args.checkpoint)
    data = SceneDataset.load(args.dataset)
    ev = evaluate(state, data, args.split)
    table, csv = format_metrics(ev["per_image"], ev["psnr"], ev["ssim"])
    sys.stdout.write(table)
    out = args.out or args.checkpoint.with_name("metrics.csv")
    out.write_text(csv)
    return 0


def cmd_bench(args) -> int:
    from .bench import RESULT_HEADER, run_bench

    cfg = _require_config(args)
    rows = run_bench(cfg)
    print(RESULT_HEADER)
    for row in rows:
        print(row.csv())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = 1 if args.deterministic else args.threads
    if threads is not None:
        if threads < 1:
            print("lnerf: error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ParseError, FormatError, DomainError) as exc:
        print(f"lnerf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lnerf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
