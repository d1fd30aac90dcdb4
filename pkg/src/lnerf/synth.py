"""Ray-cast synthetic scenes with simulated LiDAR.

A scene spec is JSON::

    {
      "image": {"width": 160, "height": 120, "hfov_deg": 60, "supersample": 2},
      "trajectory": {"poses": 20, "radius": 5, "height": 1.5, "arc_deg": [-60, 60],
                     "center": [0, 0, 0], "look_at": [0, 0, 0.5]},
      "light": {"direction": [0.4, 0.3, 1.0], "ambient": 0.35},
      "ground": {"height": 0.0, "half_size": 6.0, "albedo": [0.5, 0.5, 0.5],
                 "specular": 0.0, "shininess": 32},
      "primitives": [
        {"type": "box", "min": [..], "max": [..], "albedo": [..], "specular": 0.0, "shininess": 32},
        {"type": "sphere", "center": [..], "radius": 0.7, "albedo": [..]}
      ],
      "lidar": {"rows": 96, "cols": 360, "vfov_deg": [-50, 10], "dropout": 0.0,
                "max_elevation_deg": null},
      "seed": 0
    }

World z is up. Sky (no hit) is black.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError
from .geometry import CameraModel, pixel_directions, save_poses
from .imageio import write_pgm16, write_ppm
from .lidar import PointCloud, write_ply

TEST_EVERY = 10


@dataclass
class Primitive:
    kind: str
    params: dict
    albedo: np.ndarray
    specular: float = 0.0
    shininess: float = 32.0


@dataclass
class SyntheticSceneSpec:
    width: int = 160
    height: int = 120
    hfov_deg: float = 60.0
    supersample: int = 2
    poses: int = 20
    radius: float = 5.0
    cam_height: float = 1.5
    arc_deg: tuple = (-60.0, 60.0)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    look_at: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.5]))
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.4, 0.3, 1.0]))
    ambient: float = 0.35
    ground: Optional[dict] = None
    primitives: list = field(default_factory=list)
    lidar_rows: int = 96
    lidar_cols: int = 360
    lidar_vfov: tuple = (-50.0, 10.0)
    lidar_dropout: float = 0.0
    lidar_max_elevation: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.poses < 2:
            raise ParseError("a trajectory needs at least 2 poses")


def _vec(v, n=3, what="vector"):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size != n:
        raise ParseError(f"{what} must have {n} numbers")
    return arr


def parse_scene_spec(data: dict) -> SyntheticSceneSpec:
    try:
        img = data.get("image", {})
        traj = data.get("trajectory", {})
        light = data.get("light", {})
        lidar = data.get("lidar", {})
        prims = []
        for p in data.get("primitives", []):
            kind = p["type"]
            if kind == "box":
                lo, hi = _vec(p["min"], what="box min"), _vec(p["max"], what="box max")
                if np.any(lo >= hi):
                    raise ParseError("box min must be below max")
                params = {"min": lo, "max": hi}
            elif kind == "sphere":
                params = {"center": _vec(p["center"]), "radius": float(p["radius"])}
                if params["radius"] <= 0:
                    raise ParseError("sphere radius must be positive")
            else:
                raise ParseError(f"unknown primitive type {kind!r}")
            prims.append(Primitive(kind, params, _vec(p.get("albedo", [0.7, 0.7, 0.7])),
                                   float(p.get("specular", 0.0)), float(p.get("shininess", 32.0))))
        ground = data.get("ground")
        if ground is not None:
            ground = {"height": float(ground.get("height", 0.0)),
                      "half_size": float(ground.get("half_size", 6.0)),
                      "albedo": _vec(ground.get("albedo", [0.5, 0.5, 0.5])),
                      "specular": float(ground.get("specular", 0.0)),
                      "shininess": float(ground.get("shininess", 32.0))}
        return SyntheticSceneSpec(
            width=int(img.get("width", 160)), height=int(img.get("height", 120)),
            hfov_deg=float(img.get("hfov_deg", 60.0)), supersample=int(img.get("supersample", 2)),
            poses=int(traj.get("poses", 20)), radius=float(traj.get("radius", 5.0)),
            cam_height=float(traj.get("height", 1.5)), arc_deg=tuple(traj.get("arc_deg", (-60.0, 60.0))),
            center=_vec(traj.get("center", [0, 0, 0])), look_at=_vec(traj.get("look_at", [0, 0, 0.5])),
            light_dir=_vec(light.get("direction", [0.4, 0.3, 1.0])), ambient=float(light.get("ambient", 0.35)),
            ground=ground, primitives=prims,
            lidar_rows=int(lidar.get("rows", 96)), lidar_cols=int(lidar.get("cols", 360)),
            lidar_vfov=tuple(lidar.get("vfov_deg", (-50.0, 10.0))),
            lidar_dropout=float(lidar.get("dropout", 0.0)),
            lidar_max_elevation=lidar.get("max_elevation_deg"),
            seed=int(data.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"invalid scene spec: {exc!r}") from None


def load_scene_spec(path) -> SyntheticSceneSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read scene spec {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ParseError("scene spec must be a JSON object")
    return parse_scene_spec(data)


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose for an x-right, y-down, z-forward camera."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, position
    return pose


def trajectory(spec: SyntheticSceneSpec) -> list[CameraModel]:
    fx = 0.5 * spec.width / np.tan(np.radians(spec.hfov_deg) / 2)
    cams = []
    for ang in np.radians(np.linspace(spec.arc_deg[0], spec.arc_deg[1], spec.poses)):
        pos = spec.center + np.array([spec.radius * np.cos(ang), spec.radius * np.sin(ang), spec.cam_height])
        cams.append(CameraModel(fx, fx, spec.width / 2, spec.height / 2, spec.width, spec.height,
                                look_at_pose(pos, spec.look_at)))
    return cams


def split_labels(n_poses: int) -> list[str]:
    return ["test" if i % TEST_EVERY == 0 else "train" for i in range(n_poses)]


@dataclass
class Hits:
    t: np.ndarray          # inf where nothing is hit
    normal: np.ndarray
    prim: np.ndarray       # -1 ground, -2 miss, else primitive index


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    enter = tmin.max(axis=1)
    leave = tmax.min(axis=1)
    hit = (enter <= leave) & (enter > 1e-9)
    axis = tmin.argmax(axis=1)
    n = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    n[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, enter, np.inf), n


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = np.sum(oc * d, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    t = np.where(t > 1e-9, t, -b + sq)
    ok = (disc >= 0) & (t > 1e-9)
    t = np.where(ok, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, (p - c) / r


def raycast(spec: SyntheticSceneSpec, o: np.ndarray, d: np.ndarray) -> Hits:
    n = o.shape[0]
    best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    prim = np.full(n, -2, dtype=np.int64)
    cands = []
    if spec.ground is not None:
        g = spec.ground
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (g["height"] - o[:, 2]) / d[:, 2]
        p = o + np.nan_to_num(t, posinf=0, neginf=0)[:, None] * d
        ok = (d[:, 2] < 0) & (t > 1e-9) & (np.abs(p[:, 0]) <= g["half_size"]) & (np.abs(p[:, 1]) <= g["half_size"])
        cands.append((-1, np.where(ok, t, np.inf), np.broadcast_to([0.0, 0.0, 1.0], (n, 3))))
    for i, pr in enumerate(spec.primitives):
        if pr.kind == "box":
            t, nrm = _hit_box(o, d, pr.params["min"], pr.params["max"])
        else:
            t, nrm = _hit_sphere(o, d, pr.params["center"], pr.params["radius"])
        cands.append((i, t, nrm))
    for idx, t, nrm in cands:
        closer = t < best
        best = np.where(closer, t, best)
        normal = np.where(closer[:, None], nrm, normal)
        prim = np.where(closer, idx, prim)
    return Hits(best, normal, prim)


def shade(spec: SyntheticSceneSpec, d: np.ndarray, hits: Hits) -> np.ndarray:
    n_rays = d.shape[0]
    albedo = np.zeros((n_rays, 3))
    spec_k = np.zeros(n_rays)
    shin = np.ones(n_rays)
    if spec.ground is not None:
        albedo[hits.prim == -1] = spec.ground["albedo"]
        spec_k[hits.prim == -1] = spec.ground["specular"]
        shin[hits.prim == -1] = spec.ground["shininess"]
    for i, pr in enumerate(spec.primitives):
        m = hits.prim == i
        albedo[m] = pr.albedo
        spec_k[m] = pr.specular
        shin[m] = pr.shininess
    light = spec.light_dir / np.linalg.norm(spec.light_dir)
    ndl = np.clip(hits.normal @ light, 0.0, None)
    color = albedo * (spec.ambient + (1.0 - spec.ambient) * ndl)[:, None]
    refl = 2.0 * ndl[:, None] * hits.normal - light
    rdv = np.clip(np.sum(refl * -d, axis=1), 0.0, None)
    color += (spec_k * rdv ** shin * (ndl > 0))[:, None]
    color[hits.prim == -2] = 0.0
    return np.clip(color, 0.0, 1.0)


def render_view(spec: SyntheticSceneSpec, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Anti-aliased color image and center-ray depth (0 where the ray escapes)."""
    h, w, s = cam.height, cam.width, spec.supersample
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px, py = xs.reshape(-1).astype(np.float64), ys.reshape(-1).astype(np.float64)
    origin = np.broadcast_to(cam.position, (px.size, 3))
    acc = np.zeros((px.size, 3))
    for i in range(s):
        for j in range(s):
            d = pixel_directions(cam, px + (j + 0.5) / s - 0.5, py + (i + 0.5) / s - 0.5)
            acc += shade(spec, d, raycast(spec, origin, d))
    d = pixel_directions(cam, px, py)
    hits = raycast(spec, origin, d)
    depth = np.where(np.isfinite(hits.t), hits.t, 0.0)
    return (acc / (s * s)).reshape(h, w, 3), depth.reshape(h, w)


def simulate_lidar(spec: SyntheticSceneSpec, cams: list[CameraModel]) -> PointCloud:
    """First-hit returns of a spinning scanner placed at every camera center."""
    rng = np.random.default_rng(spec.seed)
    elev = np.radians(np.linspace(spec.lidar_vfov[0], spec.lidar_vfov[1], spec.lidar_rows))
    if spec.lidar_max_elevation is not None:
        elev = elev[elev <= np.radians(spec.lidar_max_elevation)]
    azim = np.linspace(0.0, 2 * np.pi, spec.lidar_cols, endpoint=False)
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1).reshape(-1, 3)
    pts = []
    for cam in cams:
        o = np.broadcast_to(cam.position, dirs.shape)
        hits = raycast(spec, o, dirs)
        keep = np.isfinite(hits.t)
        if spec.lidar_dropout > 0:
            keep &= rng.random(keep.size) >= spec.lidar_dropout
        pts.append(o[keep] + hits.t[keep, None] * dirs[keep])
    return PointCloud(np.concatenate(pts) if pts else np.zeros((0, 3)))


def synthesize(spec: SyntheticSceneSpec, out_dir) -> dict:
    """Write poses.json, images/, depth/ and pointcloud.ply for ``spec`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    cams = trajectory(spec)
    splits = split_labels(len(cams))
    save_poses(out / "poses.json", cams, splits)
    peak = max(spec.radius * 4.0, 1.0)
    for i, cam in enumerate(cams):
        img, depth = render_view(spec, cam)
        write_ppm(out / "images" / f"{i:04d}.ppm", img)
        write_pgm16(out / "depth" / f"{i:04d}.pgm", depth, scale=65535.0 / peak)
    cloud = simulate_lidar(spec, cams)
    write_ply(out / "pointcloud.ply", cloud, binary=True, dtype="double")
    return {"poses": len(cams), "test": splits.count("test"), "points": len(cloud)}
