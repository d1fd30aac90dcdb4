"""Ablation benchmark: time-to-target PSNR, samples per ray and render rate per variant."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .config import RunConfig
from .errors import DomainError
from .pipeline import SceneDataset, load_pointcloud, run_training

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "no_lidar_init": {"no_lidar_init": True},
    "no_color_decomp": {"no_color_decomp": True},
    "bg_none": {"bg_mode": "none"},
}

RESULT_HEADER = ("variant,iterations_to_target,seconds_to_target,mean_samples_per_ray,"
                 "rays_per_sec,final_psnr,iterations_run")
CURVE_HEADER = "iter,train_seconds,psnr,samples_per_ray"


@dataclass
class BenchRow:
    variant: str
    iterations_to_target: float   # inf when the target was not reached
    seconds_to_target: float
    mean_samples_per_ray: float
    rays_per_sec: float
    final_psnr: float
    iterations_run: int
    curve: list                   # (iteration, train seconds, psnr, samples/ray)

    def csv(self) -> str:
        def num(v):
            return "inf" if math.isinf(v) else f"{v:.6g}"
        return (f"{self.variant},{num(self.iterations_to_target)},{num(self.seconds_to_target)},"
                f"{self.mean_samples_per_ray:.6g},{self.rays_per_sec:.6g},{self.final_psnr:.6f},"
                f"{self.iterations_run}")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise DomainError(f"unknown benchmark variant {variant!r}; choose from {sorted(VARIANTS)}")
    return cfg.copy(**VARIANTS[variant])


def run_variant(cfg: RunConfig, data: SceneDataset, variant: str, target_psnr: float,
                max_iterations: int, wall_clock_cap: Optional[float]) -> BenchRow:
    vcfg = variant_config(cfg, variant)
    res = run_training(vcfg, data, load_pointcloud(vcfg, data), target_psnr=target_psnr,
                       max_iterations=max_iterations, wall_clock_cap=wall_clock_cap)
    curve = [(it, secs, p, spr) for it, p, spr, _, secs in res.history]
    if not curve:
        raise DomainError(f"variant {variant!r} finished without an evaluation")
    reached = res.reached_at is not None
    iters = float(res.reached_at) if reached else math.inf
    secs = curve[-1][1] if reached else math.inf
    mean_spr = sum(c[3] for c in curve) / len(curve)
    return BenchRow(variant, iters, secs, mean_spr, res.history[-1][3], curve[-1][2], len(res.losses), curve)


def run_bench(cfg: RunConfig, data: Optional[SceneDataset] = None, out_dir: Optional[Path] = None,
              variants: Optional[tuple] = None) -> list[BenchRow]:
    b = cfg.section("bench")
    if data is None:
        data = SceneDataset.load(cfg.path("scene.dataset"))
    out = Path(out_dir) if out_dir is not None else cfg.path("bench.out_dir")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in variants or b["variants"]:
        log.info("bench variant %s", v)
        row = run_variant(cfg, data, v, b["target_psnr"], b["max_iterations"], b["wall_clock_cap"])
        rows.append(row)
        with open(out / f"curve_{v}.csv", "w") as fh:
            fh.write(CURVE_HEADER + "\n")
            for it, secs, p, spr in row.curve:
                fh.write(f"{it},{secs:.6g},{p:.6f},{spr:.6g}\n")
    with open(out / "results.csv", "w") as fh:
        fh.write(RESULT_HEADER + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")
    return rows
