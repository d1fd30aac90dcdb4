"""Occupancy-grid ray marching.

Foreground samples come from fixed-step marching through the foreground box,
skipping voxels whose occupancy bit is clear. Background samples are spaced
uniformly in inverse inf-norm radius between the foreground and background
boxes, then filtered by the same occupancy grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numba as nb
import numpy as np

from .geometry import Ray, SceneBounds, slab_intervals

_jit = nb.njit(cache=True, nogil=True)

FOREGROUND, BACKGROUND = 0, 1


class OccupancyGrid:
    """Binary voxel grid over the background box with a per-voxel density EMA."""

    def __init__(self, bounds: SceneBounds, resolution=128, step: Optional[float] = None,
                 update_interval: int = 16, decay: float = 0.95, occ_threshold: float = 0.01):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        res = np.asarray(resolution, dtype=np.int64).reshape(-1)
        self.resolution = np.repeat(res, 3) if res.size == 1 else res
        self.box = bounds.bg
        self.step = float(step) if step is not None else bounds.fg.diagonal / 1024
        self.update_interval = int(update_interval)
        self.decay = float(decay)
        self.occ_threshold = float(occ_threshold)
        n = int(np.prod(self.resolution))
        self.bits = np.zeros(n, dtype=np.bool_)
        self.ema = np.zeros(n, dtype=np.float32)

    @property
    def n_voxels(self) -> int:
        return self.bits.size

    @property
    def voxel_size(self) -> np.ndarray:
        return self.box.extent / self.resolution

    @property
    def fill_density(self) -> float:
        """Stored density that keeps a voxel occupied only until its next update.

        Sits halfway (in log scale) between the threshold and threshold / decay, so
        a filled voxel is cleared at its first update unless its density holds it.
        """
        return self.occ_threshold / self.step / np.sqrt(self.decay)

    def fill(self, density: Optional[float] = None) -> None:
        """Mark every voxel occupied (used when no geometry prior is available)."""
        self.ema[:] = self.fill_density if density is None else density
        self.refresh_bits()

    def refresh_bits(self) -> None:
        self.bits[:] = self.ema.astype(np.float64) * self.step > self.occ_threshold

    def voxel_indices(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ijk = np.floor((x - self.box.min) / self.box.extent * self.resolution).astype(np.int64)
        ijk = np.clip(ijk, 0, self.resolution - 1)
        return ijk[:, 0] + self.resolution[0] * (ijk[:, 1] + self.resolution[1] * ijk[:, 2])

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        nx, ny = self.resolution[0], self.resolution[1]
        i = indices % nx
        j = (indices // nx) % ny
        k = indices // (nx * ny)
        ijk = np.stack([i, j, k], axis=-1).astype(np.float64)
        return self.box.min + (ijk + 0.5) * self.voxel_size

    def mark(self, x, density: float) -> None:
        idx = self.voxel_indices(x)
        np.maximum.at(self.ema, idx, np.float32(density))
        self.bits[idx] = self.ema[idx].astype(np.float64) * self.step > self.occ_threshold

    def is_occupied(self, x) -> np.ndarray:
        return self.bits[self.voxel_indices(x)]


def update_occupancy(occ: OccupancyGrid, density_fn: Callable[[np.ndarray], np.ndarray],
                     iteration: int, seed: int = 0, chunk: int = 1 << 18) -> bool:
    """Refresh the EMA and bits from ``density_fn``. Runs only every ``update_interval`` iterations."""
    if iteration % occ.update_interval != 0:
        return False
    rng = np.random.default_rng([seed, iteration, 0x0CC])
    for start in range(0, occ.n_voxels, chunk):
        idx = np.arange(start, min(start + chunk, occ.n_voxels))
        centers = occ.voxel_centers(idx)
        jittered = centers + (rng.random(centers.shape) - 0.5) * occ.voxel_size
        sigma = np.maximum(density_fn(centers), density_fn(jittered))
        occ.ema[idx] = np.maximum(occ.decay * occ.ema[idx], sigma.astype(np.float32))
    occ.refresh_bits()
    return True


@dataclass(frozen=True)
class SamplePoint:
    position: np.ndarray
    t: float
    delta: float
    segment: int


@dataclass
class SampleBatch:
    offsets: np.ndarray     # (rays + 1,)
    positions: np.ndarray   # (n, 3)
    t: np.ndarray
    delta: np.ndarray
    is_bg: np.ndarray
    ray_ids: np.ndarray

    @property
    def ray_count(self) -> int:
        return self.offsets.size - 1

    @property
    def sample_count(self) -> int:
        return self.t.size

    @property
    def samples_per_ray(self) -> float:
        return self.sample_count / max(self.ray_count, 1)

    def ray_samples(self, i: int) -> list[SamplePoint]:
        s, e = self.offsets[i], self.offsets[i + 1]
        return [SamplePoint(self.positions[j].copy(), float(self.t[j]), float(self.delta[j]),
                            BACKGROUND if self.is_bg[j] else FOREGROUND) for j in range(s, e)]

    def select(self, keep: np.ndarray) -> "SampleBatch":
        """Sub-batch keeping the masked samples (ray count unchanged)."""
        ray_ids = self.ray_ids[keep]
        counts = np.bincount(ray_ids, minlength=self.ray_count)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return SampleBatch(offsets, self.positions[keep], self.t[keep], self.delta[keep],
                           self.is_bg[keep], ray_ids)


@_jit
def _voxel(p, lo, ext, res):
    idx = 0
    stride = 1
    for k in range(3):
        c = int(math.floor((p[k] - lo[k]) / ext[k] * res[k]))
        if c < 0:
            c = 0
        elif c > res[k] - 1:
            c = res[k] - 1
        idx += c * stride
        stride *= res[k]
    return idx


@_jit
def _voxel_exit(p, d, t, lo, ext, res):
    t_exit = np.inf
    for k in range(3):
        if d[k] == 0.0:
            continue
        size = ext[k] / res[k]
        c = math.floor((p[k] - lo[k]) / size)
        face = lo[k] + (c + 1.0) * size if d[k] > 0 else lo[k] + c * size
        t_exit = min(t_exit, t + (face - p[k]) / d[k])
    return t_exit


@_jit
def _slab(o, d, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return np.inf, -np.inf
        else:
            a = (lo[k] - o[k]) / d[k]
            b = (hi[k] - o[k]) / d[k]
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
    return t0, t1


@_jit
def _radius(a, b, t):
    r = 0.0
    for k in range(3):
        r = max(r, abs(a[k] + t * b[k]))
    return r


@_jit
def _t_at_radius(a, b, rho, outgoing):
    # first (outgoing) or last (incoming) crossing of the rho-scaled foreground box
    if outgoing:
        t = np.inf
        for k in range(3):
            if b[k] != 0.0:
                t = min(t, (math.copysign(rho, b[k]) - a[k]) / b[k])
    else:
        t = -np.inf
        for k in range(3):
            if b[k] != 0.0:
                t = max(t, (-math.copysign(rho, b[k]) - a[k]) / b[k])
    return t


@_jit
def _emit_bg(a, b, o, d, t0, t1, outgoing, n_bg, bits, lo, ext, res,
             count, pos, ts, deltas, segs, rid, ray):
    r0 = _radius(a, b, t0)
    r1 = _radius(a, b, t1)
    if r0 < 1.0:
        r0 = 1.0
    if r1 < 1.0:
        r1 = 1.0
    inv0 = 1.0 / r0
    inv1 = 1.0 / r1
    if inv0 == inv1:
        return count
    p = np.empty(3)
    for i in range(n_bg):
        if i == 0:
            ta = t0
        else:
            ta = _t_at_radius(a, b, 1.0 / (inv0 + (inv1 - inv0) * i / n_bg), outgoing)
        if i == n_bg - 1:
            tb = t1
        else:
            tb = _t_at_radius(a, b, 1.0 / (inv0 + (inv1 - inv0) * (i + 1) / n_bg), outgoing)
        if not (tb > ta):
            continue
        for k in range(3):
            p[k] = o[k] + ta * d[k]
        if not bits[_voxel(p, lo, ext, res)]:
            continue
        if count < pos.shape[0]:
            for k in range(3):
                pos[count, k] = p[k]
            ts[count] = ta
            deltas[count] = tb - ta
            segs[count] = True
            rid[count] = ray
        count += 1
    return count


@_jit
def _march(origins, dirs, t_near, fg_lo, fg_hi, bg_lo, bg_hi, center, half,
           bits, res, step, jitter, n_bg, counts, pos, ts, deltas, segs, rid):
    n_rays = origins.shape[0]
    bg_ext = bg_hi - bg_lo
    a = np.empty(3)
    b = np.empty(3)
    p = np.empty(3)
    count = 0
    for ray in range(n_rays):
        o = origins[ray]
        d = dirs[ray]
        start = count
        tb0, tb1 = _slab(o, d, bg_lo, bg_hi)
        tb0 = max(tb0, t_near)
        if tb0 >= tb1:
            counts[ray] = 0
            continue
        for k in range(3):
            a[k] = (o[k] - center[k]) / half[k]
            b[k] = d[k] / half[k]
        tf0, tf1 = _slab(o, d, fg_lo, fg_hi)
        tf0 = max(tf0, tb0)
        hits_fg = tf0 < tf1 and fg_lo[0] <= fg_hi[0]
        if hits_fg:
            if tf0 > tb0:
                count = _emit_bg(a, b, o, d, tb0, tf0, False, n_bg, bits, bg_lo, bg_ext, res,
                                 count, pos, ts, deltas, segs, rid, ray)
            # samples sit on the lattice tf0 + (jitter + i) * step
            t_base = tf0 + jitter[ray] * step
            i = 0
            t = t_base
            while t < tf1:
                for k in range(3):
                    p[k] = o[k] + t * d[k]
                if bits[_voxel(p, bg_lo, bg_ext, res)]:
                    if count < pos.shape[0]:
                        for k in range(3):
                            pos[count, k] = p[k]
                        ts[count] = t
                        deltas[count] = step
                        segs[count] = False
                        rid[count] = ray
                    count += 1
                    i += 1
                else:
                    # jump to the last lattice point before the empty voxel's exit
                    i = max(i + 1, int(math.floor((_voxel_exit(p, d, t, bg_lo, bg_ext, res) - t_base) / step)))
                t = t_base + i * step
            if tf1 < tb1:
                count = _emit_bg(a, b, o, d, tf1, tb1, True, n_bg, bits, bg_lo, bg_ext, res,
                                 count, pos, ts, deltas, segs, rid, ray)
        else:
            # ray misses the foreground: split at the inf-norm radius minimum (convex in t)
            lo_t = tb0
            hi_t = tb1
            for _ in range(100):
                m1 = lo_t + (hi_t - lo_t) / 3.0
                m2 = hi_t - (hi_t - lo_t) / 3.0
                if _radius(a, b, m1) < _radius(a, b, m2):
                    hi_t = m2
                else:
                    lo_t = m1
            tm = 0.5 * (lo_t + hi_t)
            count = _emit_bg(a, b, o, d, tb0, tm, False, n_bg, bits, bg_lo, bg_ext, res,
                             count, pos, ts, deltas, segs, rid, ray)
            count = _emit_bg(a, b, o, d, tm, tb1, True, n_bg, bits, bg_lo, bg_ext, res,
                             count, pos, ts, deltas, segs, rid, ray)
        counts[ray] = count - start
    return count


def _buffers(cap: int):
    return (np.empty((cap, 3)), np.empty(cap), np.empty(cap), np.empty(cap, dtype=np.bool_),
            np.empty(cap, dtype=np.int64))


def march_rays(origins: np.ndarray, dirs: np.ndarray, bounds: SceneBounds, occ: OccupancyGrid,
               step: Optional[float] = None, n_bg: int = 64, jitter: Optional[np.ndarray] = None,
               t_near: float = 0.0, foreground: bool = True, background: bool = True) -> SampleBatch:
    """Sample many rays at once. ``jitter`` holds per-ray offsets in [0, 1) steps (None: midpoints)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    step = occ.step if step is None else float(step)
    jitter = np.full(n, 0.5) if jitter is None else np.ascontiguousarray(jitter, dtype=np.float64)
    fg_lo, fg_hi = bounds.fg.min, bounds.fg.max
    if not foreground:
        # an empty foreground box: everything inside bg is marched as background
        fg_lo, fg_hi = np.full(3, np.inf), np.full(3, -np.inf)
    bits = occ.bits
    if not background:
        n_bg = 0
    args = (origins, dirs, float(t_near), fg_lo, fg_hi, bounds.bg.min, bounds.bg.max,
            bounds.fg.center, 0.5 * bounds.fg.extent, bits, occ.resolution, step, jitter, int(n_bg))
    counts = np.zeros(n, dtype=np.int64)
    # write into a guessed buffer; rerun with the exact size only on overflow
    bufs = _buffers(128 * n)
    total = _march(*args, counts, *bufs)
    if total > bufs[1].size:
        bufs = _buffers(total)
        _march(*args, counts, *bufs)
    pos, ts, deltas, segs, rid = (b[:total] for b in bufs)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return SampleBatch(offsets, pos, ts, deltas, segs, rid)


def _single(ray: Ray, bounds, occ, step, n_bg, jitter, foreground, background):
    batch = march_rays(ray.origin[None], ray.direction[None], bounds, occ, step=step, n_bg=n_bg,
                       jitter=None if jitter is None else np.array([jitter]), t_near=ray.t_near,
                       foreground=foreground, background=background)
    keep = batch.t <= ray.t_far
    return batch.select(keep).ray_samples(0)


def march_foreground(ray: Ray, bounds: SceneBounds, occ: OccupancyGrid, step: float,
                     jitter: Optional[float] = None) -> list[SamplePoint]:
    samples = _single(ray, bounds, occ, step, 0, jitter, True, False)
    return [s for s in samples if s.segment == FOREGROUND]


def march_background(ray: Ray, bounds: SceneBounds, occ: OccupancyGrid, n_bg: int) -> list[SamplePoint]:
    """Background samples after the ray leaves the foreground box (empty if it never does)."""
    t0, t1 = slab_intervals(ray.origin[None], ray.direction[None], bounds.fg.min, bounds.fg.max)
    if not (max(t0[0], ray.t_near) <= t1[0]):
        return []
    samples = _single(ray, bounds, occ, None, n_bg, None, True, True)
    return [s for s in samples if s.segment == BACKGROUND and s.t >= t1[0]]


def jitter_for(seed: int, iteration: int, ray_ids: np.ndarray) -> np.ndarray:
    """Counter-based per-ray offsets in [0, 1) keyed by (seed, iteration, ray id)."""
    rng = np.random.Generator(np.random.Philox(key=[seed, iteration]))
    # draw a block covering the largest id so a ray's offset depends only on its id
    n = int(ray_ids.max()) + 1 if ray_ids.size else 0
    return rng.random(n)[ray_ids]
