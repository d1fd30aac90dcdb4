"""Cameras, rays, boxes and scene bounds.

Camera frame convention is x-right, y-down, z-forward. Poses are 4x4
camera-to-world rigid transforms.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError


class Region(enum.IntEnum):
    FOREGROUND = 0
    BACKGROUND = 1
    OUTSIDE = 2


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "pose", pose)
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DomainError("principal point must lie inside the image")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise DomainError("pose rotation block is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    def shifted(self, offset_cam: Sequence[float]) -> "CameraModel":
        """Copy with the camera translated by ``offset_cam`` given in the camera frame."""
        pose = self.pose.copy()
        pose[:3, 3] += self.rotation @ np.asarray(offset_cam, dtype=np.float64)
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def to_record(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "c2w": [float(v) for v in self.pose.reshape(-1)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CameraModel":
        try:
            c2w = np.asarray(rec["c2w"], dtype=np.float64)
            if c2w.size != 16:
                raise DomainError("c2w must hold 16 numbers")
            return cls(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                       int(rec["width"]), int(rec["height"]), c2w.reshape(4, 4))
        except KeyError as exc:
            raise DomainError(f"camera record missing key {exc}") from None


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise DomainError("ray direction must be unit length")
        if not (0 <= self.t_near <= self.t_far):
            raise DomainError("need 0 <= t_near <= t_far")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        if np.any(lo > hi):
            raise DomainError("box min must not exceed max")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.min) & (x <= self.max), axis=-1)

    def scaled(self, factor) -> "Aabb":
        half = 0.5 * self.extent * np.asarray(factor, dtype=np.float64)
        return Aabb(self.center - half, self.center + half)


@dataclass(frozen=True)
class SceneBounds:
    fg: Aabb
    bg: Aabb
    enlargement: np.ndarray

    @classmethod
    def from_fg(cls, fg: Aabb, enlargement=(2.0, 2.0, 2.0)) -> "SceneBounds":
        enl = np.asarray(enlargement, dtype=np.float64)
        if enl.shape != (3,) or np.any(enl <= 1.0):
            raise DomainError("enlargement must exceed 1 on every axis")
        return cls(fg, fg.scaled(enl), enl)

    def normalize(self, x) -> np.ndarray:
        """Map world points so the foreground box becomes [-1, 1]^3."""
        half = 0.5 * self.fg.extent
        return (np.asarray(x, dtype=np.float64) - self.fg.center) / half


def pixel_directions(camera: CameraModel, px, py) -> np.ndarray:
    """World-frame unit directions through pixel centers (px + 0.5, py + 0.5)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack([
        (px + 0.5 - camera.cx) / camera.fx,
        (py + 0.5 - camera.cy) / camera.fy,
        np.ones_like(px),
    ], axis=-1)
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(camera: CameraModel, px: float, py: float) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise DomainError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    return Ray(camera.position, pixel_directions(camera, px, py))


def camera_rays(camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Origins and directions for every pixel, row-major (y outer, x inner)."""
    ys, xs = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    dirs = pixel_directions(camera, xs.reshape(-1), ys.reshape(-1))
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def frustum_corners(camera: CameraModel, near: float, far: float) -> np.ndarray:
    """The 8 world-space corners of the viewing frustum between depths near and far."""
    u = np.array([0.0, camera.width, camera.width, 0.0])
    v = np.array([0.0, 0.0, camera.height, camera.height])
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones(4)], axis=-1)
    pts = np.concatenate([d_cam * near, d_cam * far])
    return pts @ camera.rotation.T + camera.position


def compute_scene_bounds(cameras: Sequence[CameraModel], frustum_near: float, frustum_far: float,
                         enlargement=(2.0, 2.0, 2.0)) -> SceneBounds:
    if len(cameras) == 0:
        raise DomainError("need at least one camera to bound the scene")
    if not (0 <= frustum_near < frustum_far):
        raise DomainError("need 0 <= frustum_near < frustum_far")
    pts = [frustum_corners(c, frustum_near, frustum_far) for c in cameras]
    pts.append(np.stack([c.position for c in cameras]))
    pts = np.concatenate(pts)
    fg = Aabb(pts.min(axis=0), pts.max(axis=0))
    return SceneBounds.from_fg(fg, enlargement)


def classify_points(bounds: SceneBounds, x) -> np.ndarray:
    """Vectorized region labels (see :class:`Region`)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.full(x.shape[:-1], Region.OUTSIDE, dtype=np.int8)
    out[bounds.bg.contains(x)] = Region.BACKGROUND
    out[bounds.fg.contains(x)] = Region.FOREGROUND
    return out


def classify_point(bounds: SceneBounds, x) -> Region:
    return Region(int(classify_points(bounds, np.asarray(x, dtype=np.float64)[None])[0]))


def slab_intervals(origins, dirs, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Unclipped slab test for many rays. Returns (t_enter, t_exit); a miss has t_enter > t_exit."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel axes: inside the slab -> unconstrained, outside -> empty
    par = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def ray_aabb_intersect(ray: Ray, box: Aabb) -> Optional[tuple[float, float]]:
    t0, t1 = slab_intervals(ray.origin[None], ray.direction[None], box.min, box.max)
    t_enter = max(float(t0[0]), ray.t_near)
    t_exit = min(float(t1[0]), ray.t_far)
    if t_enter > t_exit:
        return None
    return t_enter, t_exit


def save_poses(path, cameras: Iterable[CameraModel], splits: Optional[Sequence[str]] = None) -> None:
    records = []
    for i, cam in enumerate(cameras):
        rec = cam.to_record()
        if splits is not None:
            rec["split"] = splits[i]
        records.append(rec)
    Path(path).write_text(json.dumps(records, indent=1) + "\n")


def load_poses(path) -> tuple[list[CameraModel], list[str]]:
    """Read ``poses.json``. Records without a ``split`` key count as train views."""
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(records, list):
        raise DomainError(f"{path}: expected a top-level list of camera records")
    cams = [CameraModel.from_record(r) for r in records]
    splits = [r.get("split", "train") for r in records]
    return cams, splits
