"""Explicit density grids, hashed color-embedding grids and the background warp."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import kernels
from .errors import DomainError
from .geometry import Aabb, Region, SceneBounds, classify_points

INIT_DENSITY = 1e-3
FEATURE_INIT_RANGE = 1e-4


def softplus(raw):
    return np.logaddexp(0.0, raw)


def softplus_grad(raw):
    """d softplus / d raw, i.e. the logistic function."""
    raw = np.asarray(raw)
    return np.exp(-np.logaddexp(0.0, -raw))


def softplus_inv(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise DomainError("softplus inverse needs sigma > 0")
    return sigma + np.log(-np.expm1(-sigma))


def density_activation(raw: float) -> float:
    if not np.isfinite(raw):
        raise DomainError("raw density must be finite")
    return float(softplus(raw))


class GradientBuffer:
    """Dense accumulator for one parameter array plus a per-row touched mask.

    ``grad`` has shape (rows, cols); a row is one density vertex or one hash
    table slot.
    """

    def __init__(self, rows: int, cols: int = 1, dtype=np.float64):
        self.grad = np.zeros((rows, cols), dtype=dtype)
        self.touched = np.zeros(rows, dtype=bool)

    @property
    def flat(self) -> np.ndarray:
        return self.grad.reshape(-1) if self.grad.shape[1] == 1 else self.grad

    def touched_rows(self) -> np.ndarray:
        return np.flatnonzero(self.touched)

    def reset(self) -> None:
        rows = self.touched_rows()
        self.grad[rows] = 0.0
        self.touched[rows] = False

    def merge_from(self, other: "GradientBuffer") -> None:
        rows = other.touched_rows()
        self.grad[rows] += other.grad[rows]
        self.touched[rows] = True


def _check_resolution(resolution, dims):
    res = np.asarray(resolution, dtype=np.int64).reshape(-1)
    if res.size == 1:
        res = np.repeat(res, dims)
    if res.shape != (dims,) or np.any(res < 2):
        raise DomainError(f"grid needs {dims} vertex counts >= 2")
    return res


class DensityGrid:
    """Scalar pre-activation density at the vertices of a regular lattice over ``box``.

    Vertices are stored flat with x varying fastest.
    """

    dims = 3

    def __init__(self, box: Aabb, resolution=128, dtype=np.float32, init_sigma: float = INIT_DENSITY):
        self.box = box
        self.resolution = _check_resolution(resolution, self.dims)
        self.raw = np.full(int(np.prod(self.resolution)), softplus_inv(init_sigma), dtype=dtype)

    @property
    def n_vertices(self) -> int:
        return self.raw.size

    def vertex_index(self, ijk) -> int:
        idx, stride = 0, 1
        for k, v in enumerate(ijk):
            idx += int(v) * stride
            stride *= int(self.resolution[k])
        return idx

    def vertex_position(self, ijk) -> np.ndarray:
        frac = np.asarray(ijk, dtype=np.float64) / (self.resolution - 1)
        return self.box.min + frac * self.box.extent

    def vertex_positions(self) -> np.ndarray:
        axes = [np.linspace(self.box.min[k], self.box.max[k], self.resolution[k]) for k in range(3)]
        z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1)

    def lattice_coords(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (x - self.box.min) / self.box.extent * (self.resolution - 1)

    def check_inside(self, x) -> None:
        if not np.all(self.box.contains(np.atleast_2d(x))):
            raise DomainError("query point outside the density grid box")

    @property
    def voxel_size(self) -> np.ndarray:
        return self.box.extent / (self.resolution - 1)


class BackgroundDensityGrid(DensityGrid):
    """Dense 4-D density lattice over the warped domain [-1,1]^3 x [0,1]."""

    dims = 4

    def __init__(self, resolution=(64, 64, 64, 16), dtype=np.float32, init_sigma: float = INIT_DENSITY):
        self.box = None
        self.resolution = _check_resolution(resolution, self.dims)
        self.raw = np.full(int(np.prod(self.resolution)), softplus_inv(init_sigma), dtype=dtype)

    def lattice_coords(self, xw) -> np.ndarray:
        xw = np.atleast_2d(np.asarray(xw, dtype=np.float64))
        u = np.empty_like(xw)
        u[:, :3] = (xw[:, :3] + 1.0) * 0.5 * (self.resolution[:3] - 1)
        u[:, 3] = xw[:, 3] * (self.resolution[3] - 1)
        return u

    def check_inside(self, xw) -> None:
        xw = np.atleast_2d(xw)
        ok = np.all(np.abs(xw[:, :3]) <= 1.0, axis=1) & (xw[:, 3] >= 0) & (xw[:, 3] <= 1)
        if not np.all(ok):
            raise DomainError("query point outside the warped background domain")


class HashFeatureGrid:
    """Multi-resolution feature lattice whose vertex features live in per-level hash tables."""

    def __init__(self, dims: int = 3, levels: int = 8, features_per_level: int = 4,
                 table_size: int = 2 ** 19, base_resolution: int = 16, growth_factor: float = 1.45,
                 dtype=np.float32, rng: Optional[np.random.Generator] = None,
                 tables: Optional[np.ndarray] = None):
        if dims not in (3, 4):
            raise DomainError("hash grids are 3-D or 4-D")
        if table_size <= 0 or table_size & (table_size - 1):
            raise DomainError("table_size must be a power of two")
        self.dims = dims
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = table_size
        self.base_resolution = base_resolution
        self.growth_factor = growth_factor
        self.resolutions = np.array(
            [int(np.floor(base_resolution * growth_factor ** lvl)) for lvl in range(levels)], dtype=np.int64)
        self.dense = np.array([(int(r) + 1) ** dims <= table_size for r in self.resolutions])
        if tables is not None:
            self.tables = np.asarray(tables, dtype=dtype).reshape(levels * table_size, features_per_level)
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tables = rng.uniform(-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE,
                                  size=(levels * table_size, features_per_level)).astype(dtype)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_table(self, level: int) -> np.ndarray:
        return self.tables[level * self.table_size:(level + 1) * self.table_size]


def trilerp(grid: DensityGrid, x) -> float:
    grid.check_inside(x)
    return float(kernels.dense_interp(grid.raw, grid.resolution, grid.lattice_coords(x))[0])


def trilerp_backward(grid: DensityGrid, x, upstream_grad: float, buf: GradientBuffer) -> None:
    grid.check_inside(x)
    kernels.dense_scatter(buf.flat, buf.touched, grid.resolution, grid.lattice_coords(x),
                          np.array([upstream_grad], dtype=np.float64))


def hash_index(v, level_resolution: int, table_size: int) -> int:
    if table_size <= 0 or table_size & (table_size - 1):
        raise DomainError("table_size must be a power of two")
    v = np.asarray(v, dtype=np.int64)
    dense = (level_resolution + 1) ** v.size <= table_size
    return int(kernels.hash_slot(v, level_resolution, table_size, dense))


def _check_unit(x_norm, dims):
    x = np.atleast_2d(np.asarray(x_norm, dtype=np.float64))
    if x.shape[1] != dims:
        raise DomainError(f"expected {dims}-D coordinates")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise DomainError("normalized coordinates must lie in [0, 1]")
    return x


def encode_batch(grid: HashFeatureGrid, x_norm: np.ndarray) -> np.ndarray:
    """(n, dims) points in [0,1]^dims -> (n, L*C) embeddings. No range checks."""
    return kernels.hash_encode(grid.tables, grid.table_size, grid.resolutions, grid.dense, x_norm)


def encode_backward_batch(grid: HashFeatureGrid, x_norm: np.ndarray, upstream: np.ndarray,
                          buf: GradientBuffer) -> None:
    kernels.hash_scatter(buf.grad, buf.touched, grid.table_size, grid.resolutions, grid.dense,
                         x_norm, np.ascontiguousarray(upstream))


def color_encode(grid: HashFeatureGrid, x_norm) -> np.ndarray:
    x = _check_unit(x_norm, grid.dims)
    out = encode_batch(grid, x)
    return out[0] if np.ndim(x_norm) == 1 else out


def color_encode_backward(grid: HashFeatureGrid, x_norm, upstream, buf: GradientBuffer) -> None:
    x = _check_unit(x_norm, grid.dims)
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if up.shape != (x.shape[0], grid.output_dim):
        raise DomainError("upstream gradient must have L*C entries per point")
    encode_backward_batch(grid, x, up, buf)


def warp_background(x) -> np.ndarray:
    """Map points with inf-norm >= 1 onto the unit inf-norm shell plus inverse radius."""
    x = np.asarray(x, dtype=np.float64)
    r = np.max(np.abs(x), axis=-1, keepdims=True)
    if np.any(r < 1.0):
        raise DomainError("warp_background needs inf-norm >= 1 (point is foreground)")
    return np.concatenate([x / r, 1.0 / r], axis=-1)


def unwarp_background(xw) -> np.ndarray:
    xw = np.asarray(xw, dtype=np.float64)
    return xw[..., :3] / xw[..., 3:4]


def warp_unchecked(xn: np.ndarray) -> np.ndarray:
    r = np.maximum(np.max(np.abs(xn), axis=-1, keepdims=True), 1.0)
    return np.concatenate([xn / r, 1.0 / r], axis=-1)


def fg_unit_coords(bounds: SceneBounds, x: np.ndarray) -> np.ndarray:
    return np.clip((x - bounds.fg.min) / bounds.fg.extent, 0.0, 1.0)


def bg_unit_coords(xw: np.ndarray) -> np.ndarray:
    u = np.empty_like(xw)
    u[:, :3] = np.clip((xw[:, :3] + 1.0) * 0.5, 0.0, 1.0)
    u[:, 3] = np.clip(xw[:, 3], 0.0, 1.0)
    return u


def bg_lattice_coords(bounds: SceneBounds, bg_grid: BackgroundDensityGrid, x: np.ndarray) -> np.ndarray:
    return bg_grid.lattice_coords(warp_unchecked(bounds.normalize(x)))


def density_raw_batch(bounds: SceneBounds, fg_grid: DensityGrid, bg_grid: BackgroundDensityGrid,
                      x: np.ndarray, is_bg: np.ndarray) -> np.ndarray:
    """Pre-activation density for points already labelled foreground/background."""
    out = np.empty(x.shape[0], dtype=fg_grid.raw.dtype)
    fg = ~is_bg
    if fg.any():
        u = np.clip(fg_grid.lattice_coords(x[fg]), 0.0, fg_grid.resolution - 1)
        out[fg] = kernels.dense_interp(fg_grid.raw, fg_grid.resolution, u)
    if is_bg.any():
        out[is_bg] = kernels.dense_interp(bg_grid.raw, bg_grid.resolution,
                                          bg_lattice_coords(bounds, bg_grid, x[is_bg]))
    return out


def density_backward_batch(bounds: SceneBounds, fg_grid: DensityGrid, bg_grid: BackgroundDensityGrid,
                           x: np.ndarray, is_bg: np.ndarray, d_raw: np.ndarray,
                           fg_buf: GradientBuffer, bg_buf: GradientBuffer) -> None:
    d_raw = np.asarray(d_raw, dtype=np.float64)
    fg = ~is_bg
    if fg.any():
        u = np.clip(fg_grid.lattice_coords(x[fg]), 0.0, fg_grid.resolution - 1)
        kernels.dense_scatter(fg_buf.flat, fg_buf.touched, fg_grid.resolution, u, d_raw[fg])
    if is_bg.any():
        kernels.dense_scatter(bg_buf.flat, bg_buf.touched, bg_grid.resolution,
                              bg_lattice_coords(bounds, bg_grid, x[is_bg]), d_raw[is_bg])


def density_query(bounds: SceneBounds, fg_grid: DensityGrid, bg_grid: BackgroundDensityGrid, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    region = classify_points(bounds, x)[0]
    if region == Region.OUTSIDE:
        raise DomainError("density_query point lies outside the background box")
    raw = density_raw_batch(bounds, fg_grid, bg_grid, x, np.array([region == Region.BACKGROUND]))
    return float(softplus(np.float64(raw[0])))
