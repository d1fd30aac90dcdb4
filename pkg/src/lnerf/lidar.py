"""Point-cloud ingestion and density/occupancy initialization from geometry priors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .errors import ParseError, TruncationError
from .fields import BackgroundDensityGrid, DensityGrid, softplus_inv, warp_unchecked
from .geometry import Region, SceneBounds, classify_points
from .sampler import OccupancyGrid

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) float64

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) ; dtype None marks a list property


def _read_header(fh):
    line_no = 0

    def next_line():
        nonlocal line_no
        raw = fh.readline()
        line_no += 1
        if not raw:
            raise ParseError("unexpected end of file inside header", line_no)
        try:
            return raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ASCII byte in header", line_no) from None

    if next_line() != "ply":
        raise ParseError("missing 'ply' magic", line_no)
    fmt = None
    elements: list[_Element] = []
    while True:
        line = next_line()
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) != 3 or parts[2] != "1.0" or parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format line {line!r}", line_no)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError(f"malformed element line {line!r}", line_no)
            elements.append(_Element(parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", line_no)
            if len(parts) == 5 and parts[1] == "list":
                elements[-1].props.append((parts[4], None))
            elif len(parts) == 3 and parts[1] in PLY_TYPES:
                elements[-1].props.append((parts[2], PLY_TYPES[parts[1]]))
            else:
                raise ParseError(f"malformed property line {line!r}", line_no)
        elif parts[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {parts[0]!r}", line_no)
    if fmt is None:
        raise ParseError("header has no format line", line_no)
    vertex = [e for e in elements if e.name == "vertex"]
    if not vertex:
        raise ParseError("header declares no vertex element", line_no)
    names = [p[0] for p in vertex[0].props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}", line_no)
    if any(dt is None for _, dt in vertex[0].props):
        raise ParseError("list properties on vertices are not supported", line_no)
    return fmt, elements, line_no


def load_ply(path) -> PointCloud:
    """Read x, y, z of every vertex from an ascii or binary little-endian PLY file."""
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _read_header(fh)
        body = fh.read()
    for e in elements:
        if e.name == "vertex":
            break
        if e.count and (fmt == "ascii" or any(dt is None for _, dt in e.props)):
            raise ParseError(f"cannot skip element {e.name!r} preceding the vertices")
    vert = next(e for e in elements if e.name == "vertex")
    names = [p[0] for p in vert.props]
    cols = [names.index(a) for a in "xyz"]
    if fmt == "binary_little_endian":
        skip = sum(e.count * int(np.dtype(",".join("<" + dt for _, dt in e.props)).itemsize)
                   for e in elements[:elements.index(vert)])
        dtype = np.dtype([(f"p{i}", "<" + dt) for i, (_, dt) in enumerate(vert.props)])
        need = skip + vert.count * dtype.itemsize
        if len(body) < need:
            raise TruncationError(f"expected {vert.count} vertices, file holds "
                                  f"{max(len(body) - skip, 0) // dtype.itemsize}")
        rec = np.frombuffer(body, dtype=dtype, count=vert.count, offset=skip)
        pts = np.stack([rec[f"p{c}"].astype(np.float64) for c in cols], axis=-1)
        return PointCloud(pts.reshape(-1, 3))
    lines = body.decode("ascii").splitlines()
    pts = np.empty((vert.count, 3))
    for i in range(vert.count):
        line_no = header_lines + 1 + i
        if i >= len(lines) or not lines[i].strip():
            raise TruncationError(f"expected {vert.count} vertices, found {i}", line_no)
        toks = lines[i].split()
        if len(toks) < len(names):
            raise ParseError(f"vertex row has {len(toks)} values, expected {len(names)}", line_no)
        try:
            row = [float(toks[c]) for c in cols]
        except ValueError:
            raise ParseError("non-numeric vertex value", line_no) from None
        pts[i] = [np.float64(np.asarray(v, dtype=vert.props[c][1])) for v, c in zip(row, cols)]
    return PointCloud(pts)


def write_ply(path, cloud: PointCloud, binary: bool = True, dtype: str = "float") -> None:
    """Write x, y, z vertices as ``float`` (32-bit) or ``double`` properties."""
    np_type = {"float": "<f4", "double": "<f8"}[dtype]
    pts = np.asarray(cloud.points, dtype=np_type)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {pts.shape[0]}\n"
              + "".join(f"property {dtype} {a}\n" for a in "xyz") + "end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.tobytes())
        else:
            for p in pts:
                fh.write((" ".join(np.format_float_positional(v, unique=True, trim="-") for v in p)
                          + "\n").encode("ascii"))


@dataclass
class ShellConfig:
    points_per_face: int = 64
    up_axis: int = 2
    forward_axis: int = 0

    def __post_init__(self):
        if self.points_per_face < 1:
            raise ValueError("points_per_face must be >= 1")


@dataclass
class LidarInitConfig:
    sigma0: Optional[float] = None   # None: opaque across one foreground voxel
    also_mark_occupancy: bool = True

    def resolve_sigma0(self, fg_grid: DensityGrid) -> float:
        if self.sigma0 is None:
            return float(-np.log(0.01) / np.min(fg_grid.voxel_size))
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        return float(self.sigma0)


def shell_faces(cfg: ShellConfig) -> list[tuple[int, float]]:
    """(axis, sign) of the top, front, left and right faces. Left is up x forward."""
    up, fwd = cfg.up_axis, cfg.forward_axis
    lat = 3 - up - fwd
    e_up, e_fwd = np.eye(3)[up], np.eye(3)[fwd]
    left_sign = float(np.sign(np.cross(e_up, e_fwd)[lat]))
    return [(up, 1.0), (fwd, 1.0), (lat, left_sign), (lat, -left_sign)]


def synthesize_shell_points(bounds: SceneBounds, cfg: ShellConfig, inset=None) -> PointCloud:
    """Lattices of points just inside the top, front, left and right faces of the background box.

    ``inset`` is the per-axis inward offset; by default one spatial cell of a
    64-vertex background density grid spanning the background box.
    """
    bg = bounds.bg
    inset = bg.extent / 63.0 if inset is None else np.broadcast_to(np.asarray(inset, dtype=np.float64), 3)
    n = cfg.points_per_face
    lattice = (np.arange(n) + 0.5) / n
    out = []
    for axis, sign in shell_faces(cfg):
        a, b = [k for k in range(3) if k != axis]
        ua, ub = np.meshgrid(lattice, lattice, indexing="ij")
        pts = np.empty((n * n, 3))
        pts[:, a] = bg.min[a] + ua.ravel() * bg.extent[a]
        pts[:, b] = bg.min[b] + ub.ravel() * bg.extent[b]
        pts[:, axis] = bg.max[axis] - inset[axis] if sign > 0 else bg.min[axis] + inset[axis]
        out.append(pts)
    return PointCloud(np.concatenate(out))


def initialize_from_points(points: PointCloud, bounds: SceneBounds, fg_grid: DensityGrid,
                           bg_grid: BackgroundDensityGrid, occ: Optional[OccupancyGrid],
                           cfg: LidarInitConfig) -> dict:
    """Max-merge softplus^-1(sigma0) into every vertex of each point's containing cell."""
    pts = np.asarray(points.points, dtype=np.float64).reshape(-1, 3)
    region = classify_points(bounds, pts)
    fg = pts[region == Region.FOREGROUND]
    bgp = pts[region == Region.BACKGROUND]
    sigma0 = cfg.resolve_sigma0(fg_grid)
    raw0 = float(softplus_inv(sigma0))
    if fg.shape[0]:
        u = np.clip(fg_grid.lattice_coords(fg), 0.0, fg_grid.resolution - 1)
        kernels.dense_max_merge(fg_grid.raw, fg_grid.resolution, u, fg_grid.raw.dtype.type(raw0))
    if bgp.shape[0]:
        u = bg_grid.lattice_coords(warp_unchecked(bounds.normalize(bgp)))
        kernels.dense_max_merge(bg_grid.raw, bg_grid.resolution, u, bg_grid.raw.dtype.type(raw0))
    if occ is not None and cfg.also_mark_occupancy:
        inside = np.concatenate([fg, bgp])
        if inside.shape[0]:
            idx = occ.voxel_indices(inside)
            np.maximum.at(occ.ema, idx, np.float32(sigma0))
            occ.bits[idx] = True
    return {"fg_points": int(fg.shape[0]), "bg_points": int(bgp.shape[0]),
            "skipped": int(pts.shape[0] - fg.shape[0] - bgp.shape[0]), "sigma0": sigma0}
