"""Dataset loading, scene construction and the training / evaluation loops."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .errors import DomainError
from .fields import BackgroundDensityGrid, DensityGrid, HashFeatureGrid
from .geometry import CameraModel, SceneBounds, camera_rays, compute_scene_bounds, load_poses
from .imageio import read_pgm16, read_ppm
from .lidar import LidarInitConfig, PointCloud, ShellConfig, initialize_from_points, load_ply, synthesize_shell_points
from .renderer import ColorHeads, RenderSettings, SceneState, render_rays
from .sampler import OccupancyGrid
from .trainer import RayDataset, TrainConfig, Trainer, psnr, ssim

log = logging.getLogger(__name__)

LOG_HEADER = "iter,L_p,L_r,total,weight_mean,psnr_eval,samples_per_ray,elapsed_sec"


@dataclass
class SceneDataset:
    root: Path
    cameras: list
    splits: list
    images: list
    depths: Optional[list] = None

    @classmethod
    def load(cls, root) -> "SceneDataset":
        root = Path(root)
        poses = root / "poses.json"
        if not poses.exists():
            raise DomainError(f"no poses.json in dataset {root}")
        cams, splits = load_poses(poses)
        images = []
        for i in range(len(cams)):
            path = root / "images" / f"{i:04d}.ppm"
            if not path.exists():
                raise DomainError(f"missing image {path}")
            img = read_ppm(path)
            if img.shape[:2] != (cams[i].height, cams[i].width):
                raise DomainError(f"{path} does not match its camera size")
            images.append(img)
        depths = None
        if (root / "depth").is_dir():
            depths = [read_pgm16(root / "depth" / f"{i:04d}.pgm")[0] for i in range(len(cams))]
        return cls(root, cams, splits, images, depths)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def rays(self, split: str = "train") -> RayDataset:
        o, d, c = [], [], []
        for i in self.indices(split):
            oi, di = camera_rays(self.cameras[i])
            o.append(oi)
            d.append(di)
            c.append(self.images[i].reshape(-1, 3))
        if not o:
            raise DomainError(f"dataset has no {split!r} views")
        return RayDataset(np.concatenate(o), np.concatenate(d), np.concatenate(c))

    @property
    def pointcloud_path(self) -> Path:
        return self.root / "pointcloud.ply"


def _dtype(cfg: RunConfig):
    return {"float32": np.float32, "float64": np.float64}[cfg["grid.dtype"]]


def scene_bounds(cameras: list[CameraModel], cfg: RunConfig) -> SceneBounds:
    return compute_scene_bounds(cameras, cfg["scene.frustum_near"], cfg["scene.frustum_far"],
                                cfg["scene.enlargement"])


def build_scene(bounds: SceneBounds, cfg: RunConfig, seed: Optional[int] = None) -> SceneState:
    """Fresh (uninitialized) scene state from config."""
    dtype = _dtype(cfg)
    seed = cfg["train.seed"] if seed is None else seed
    rng = np.random.default_rng([seed, 7])
    g = cfg.section("grid")
    fg = DensityGrid(bounds.fg, g["fg_resolution"], dtype=dtype)
    bg = BackgroundDensityGrid((g["bg_resolution"],) * 3 + (g["bg_radial_resolution"],), dtype=dtype)
    hash_args = dict(levels=g["levels"], features_per_level=g["features"], table_size=2 ** g["log2_table_size"],
                     base_resolution=g["base_resolution"], growth_factor=g["growth_factor"], dtype=dtype)
    fg_color = HashFeatureGrid(3, rng=rng, **hash_args)
    bg_color = HashFeatureGrid(4, rng=rng, **hash_args)
    r = cfg.section("render")
    heads = ColorHeads.init(fg_color.output_dim, r["hidden"], r["layers"], r["direction_freqs"],
                            decomposed=not cfg["no_color_decomp"], rng=rng, dtype=dtype)
    s = cfg.section("sampler")
    step = s["step"] if s["step"] > 0 else bounds.fg.diagonal / 1024
    occ = OccupancyGrid(bounds, s["occ_resolution"], step=step, update_interval=s["update_interval"],
                        decay=s["decay"], occ_threshold=s["occ_threshold"])
    settings = RenderSettings(step=step, n_bg=s["n_bg"], min_transmittance=r["min_transmittance"],
                              fill=tuple(r["fill"]), background=cfg["bg_mode"] == "warped_grid",
                              chunk=r["chunk"])
    return SceneState(bounds, fg, bg, fg_color, bg_color, heads, occ, settings)


def lidar_initialize(state: SceneState, cloud: Optional[PointCloud], cfg: RunConfig) -> dict:
    """LiDAR + background-shell initialization, or a fully occupied grid when disabled."""
    if cfg["no_lidar_init"] or cloud is None:
        state.occupancy.fill()
        return {"fg_points": 0, "bg_points": 0, "skipped": 0, "shell_points": 0}
    lc = cfg.section("lidar")
    pts = cloud.points
    n_shell = 0
    if state.settings.background:
        shell = synthesize_shell_points(state.bounds, ShellConfig(lc["points_per_face"], lc["up_axis"],
                                                                  lc["forward_axis"]),
                                        inset=state.bounds.bg.extent / (state.bg_density.resolution[:3] - 1))
        n_shell = len(shell)
        pts = np.concatenate([pts, shell.points])
    init = LidarInitConfig(lc["sigma0"] if lc["sigma0"] > 0 else None, lc["mark_occupancy"])
    report = initialize_from_points(PointCloud(pts), state.bounds, state.fg_density, state.bg_density,
                                    state.occupancy, init)
    report["shell_points"] = n_shell
    return report


def render_image(state: SceneState, cam: CameraModel):
    o, d = camera_rays(cam)
    out = render_rays(state, o, d, mode="eval")
    h, w = cam.height, cam.width
    return out.rgb.reshape(h, w, 3), out.depth.reshape(h, w), out


def evaluate(state: SceneState, data: SceneDataset, split: str = "test") -> dict:
    idx = data.indices(split)
    if not idx:
        raise DomainError(f"dataset has no {split!r} split")
    rows = []
    n_rays = n_samples = 0
    t0 = time.perf_counter()
    for i in idx:
        img, _, out = render_image(state, data.cameras[i])
        rows.append((i, psnr(img, data.images[i]), ssim(img, data.images[i])))
        n_rays += out.n_samples.size
        n_samples += int(out.n_samples.sum())
    elapsed = time.perf_counter() - t0
    return {"per_image": rows,
            "psnr": float(np.mean([r[1] for r in rows])),
            "ssim": float(np.mean([r[2] for r in rows])),
            "samples_per_ray": n_samples / max(n_rays, 1),
            "rays_per_sec": n_rays / elapsed if elapsed > 0 else float("inf")}


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.section("train")
    return TrainConfig(**{k: t[k] for k in TrainConfig.__dataclass_fields__})


@dataclass
class RunResult:
    state: SceneState
    init_report: dict
    history: list          # (iteration, psnr, samples_per_ray, rays_per_sec, elapsed)
    losses: list
    reached_at: Optional[int]
    log_lines: list


def run_training(cfg: RunConfig, data: SceneDataset, cloud: Optional[PointCloud] = None,
                 log_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None,
                 target_psnr: float = 0.0, max_iterations: Optional[int] = None,
                 wall_clock_cap: Optional[float] = None,
                 on_eval: Optional[Callable[[int, dict], None]] = None) -> RunResult:
    """Initialize, train and periodically evaluate on the test split.

    Stops early once the test PSNR reaches ``target_psnr`` (when > 0) or the
    wall-clock cap is exceeded.
    """
    tcfg = train_config(cfg)
    bounds = scene_bounds(data.cameras, cfg)
    state = build_scene(bounds, cfg)
    init_report = lidar_initialize(state, cloud, cfg)
    log.info("init: %s", init_report)
    trainer = Trainer(state, data.rays("train"), tcfg)
    iterations = tcfg.iterations if max_iterations is None else max_iterations
    history, losses, lines = [], [], [LOG_HEADER]
    reached = None
    t_start = time.perf_counter()
    train_time = 0.0
    fh = open(log_path, "w") if log_path else None
    try:
        if fh:
            fh.write(LOG_HEADER + "\n")
        for it in range(iterations):
            t0 = time.perf_counter()
            rep = trainer.train_step(it)
            train_time += time.perf_counter() - t0
            losses.append(rep)
            done = it + 1
            capped = wall_clock_cap is not None and time.perf_counter() - t_start > wall_clock_cap
            if done % tcfg.eval_every == 0 or done == iterations or capped:
                ev = evaluate(state, data, "test")
                history.append((done, ev["psnr"], ev["samples_per_ray"], ev["rays_per_sec"], train_time))
                # deterministic log: no wall-clock values
                line = (f"{done},{rep.L_p:.9g},{rep.L_r:.9g},{rep.total:.9g},{rep.weight_mean:.9g},"
                        f"{ev['psnr']:.6f},{ev['samples_per_ray']:.6f},{done}")
                lines.append(line)
                if fh:
                    fh.write(line + "\n")
                    fh.flush()
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, state)
                if on_eval:
                    on_eval(done, ev)
                log.info("iter %d  L_p %.5f  psnr %.2f  samples/ray %.1f", done, rep.L_p, ev["psnr"],
                         ev["samples_per_ray"])
                if target_psnr > 0 and ev["psnr"] >= target_psnr:
                    reached = done
                    break
            if capped:
                break
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state)
    return RunResult(state, init_report, history, losses, reached, lines)


def load_pointcloud(cfg: RunConfig, data: SceneDataset) -> Optional[PointCloud]:
    if cfg["no_lidar_init"]:
        return None
    path = cfg.path("lidar.pointcloud") or data.pointcloud_path
    if not path.exists():
        raise DomainError(f"point cloud {path} not found (use no_lidar_init = true to train without it)")
    return load_ply(path)
