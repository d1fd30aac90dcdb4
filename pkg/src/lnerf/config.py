"""Run configuration: flat ``section.key = value`` lines with ``#`` comments.

Every key has a default below; unknown keys are rejected by name. Values are
parsed according to the type of their default.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from .errors import ParseError

DEFAULTS: dict[str, Any] = {
    # ablations
    "no_lidar_init": False,
    "no_color_decomp": False,
    "bg_mode": "warped_grid",          # warped_grid | none
    # scene / dataset
    "scene.dataset": "",
    "scene.out_dir": "run",
    "scene.frustum_near": 0.0,
    "scene.frustum_far": 50.0,
    "scene.enlargement": (2.0, 2.0, 2.0),
    # grids
    "grid.dtype": "float32",
    "grid.fg_resolution": 128,
    "grid.bg_resolution": 64,
    "grid.bg_radial_resolution": 16,
    "grid.levels": 8,
    "grid.features": 4,
    "grid.log2_table_size": 19,
    "grid.base_resolution": 16,
    "grid.growth_factor": 1.45,
    # sampler
    "sampler.step": 0.0,               # 0: foreground diagonal / 1024
    "sampler.n_bg": 64,
    "sampler.occ_resolution": 128,
    "sampler.update_interval": 16,
    "sampler.decay": 0.95,
    "sampler.occ_threshold": 0.01,
    # renderer
    "render.hidden": 64,
    "render.layers": 2,
    "render.direction_freqs": 4,
    "render.min_transmittance": 1e-4,
    "render.fill": (0.0, 0.0, 0.0),
    "render.chunk": 4096,
    # trainer
    "train.lambda_reg": 0.01,
    "train.batch_rays": 4096,
    "train.iterations": 2000,
    "train.lr_grids": 1.0,
    "train.lr_color_grids": 1.0,
    "train.lr_mlps": 0.01,
    "train.lr_final_ratio": 0.1,
    "train.grid_warmup": 200,
    "train.clamp_lo": 1.0,
    "train.clamp_hi": 10.0,
    "train.eps_weight": 1e-12,
    "train.beta1": 0.9,
    "train.beta2": 0.99,
    "train.adam_eps": 1e-15,
    "train.eval_every": 100,
    "train.seed": 0,
    "train.target_psnr": 0.0,          # > 0: stop once the test split reaches it
    # lidar
    "lidar.pointcloud": "",            # "": <dataset>/pointcloud.ply
    "lidar.sigma0": 0.0,               # 0: -ln(0.01) / foreground voxel edge
    "lidar.points_per_face": 64,
    "lidar.up_axis": 2,
    "lidar.forward_axis": 0,
    "lidar.mark_occupancy": True,
    # benchmark
    "bench.variants": ("full", "no_lidar_init", "no_color_decomp", "bg_none"),
    "bench.target_psnr": 30.0,
    "bench.max_iterations": 2000,
    "bench.wall_clock_cap": 900.0,
    "bench.out_dir": "bench",
}

BG_MODES = ("warped_grid", "none")


def _parse_value(key: str, text: str, default, line: int | None):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if default and isinstance(default[0], float):
                vals = tuple(float(p) for p in parts)
                if len(vals) == 1:
                    vals = vals * len(default)
                if len(vals) != len(default):
                    raise ValueError(text)
                return vals
            return tuple(parts)
        return text
    except ValueError:
        raise ParseError(f"bad value {text!r} for {key}", line) from None


class RunConfig:
    """Mapping of dotted keys to values, pre-filled with defaults."""

    def __init__(self, values: dict | None = None, base_dir: Path | None = None):
        self.values = dict(DEFAULTS)
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value, line: int | None = None) -> None:
        if key not in DEFAULTS:
            raise ParseError(f"unknown config key {key!r}", line)
        default = DEFAULTS[key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(key, value, default, line)
        if key == "bg_mode" and value not in BG_MODES:
            raise ParseError(f"bg_mode must be one of {BG_MODES}", line)
        self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def path(self, key: str) -> Path | None:
        v = self.values[key]
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def copy(self, **overrides) -> "RunConfig":
        out = RunConfig(base_dir=self.base_dir)
        out.values = dict(self.values)
        for k, v in overrides.items():
            out.set(k.replace("__", "."), v)
        return out

    def dumps(self) -> str:
        lines = []
        for k, v in self.values.items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cfg = RunConfig(base_dir=base_dir)
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", no)
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value.strip(), no)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)
