"""Binary scene checkpoints.

Layout (all little-endian):

    header      8-byte magic b"LNERFCK1", u32 version, u32 flags (bit 0: decomposed color heads)
    scene       f64[3] fg min, f64[3] fg max, f64[3] enlargement,
                f64 march step, u32 background samples, u32 background enabled,
                f64 min transmittance, f64[3] fill color
    fg density  u32 dims, u32[dims] vertex counts, f32[...] raw values (x fastest)
    bg density  same, over the warped 4-D domain
    fg color    u32 dims, u32 levels, u32 features, u32 table size, u32 base resolution,
                f64 growth factor, f32[levels * table_size * features] level-major tables
    bg color    same
    mlps        u32 head count, u32 direction frequencies, then per head (vd first):
                u32 layer count, per layer u32 fan_in, u32 fan_out, f32 weights, f32 biases
    occupancy   u32[3] voxel counts, f64 step, u32 update interval, f64 decay, f64 threshold,
                f32[...] density EMA, packed occupancy bits
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import FormatError
from .fields import BackgroundDensityGrid, DensityGrid, HashFeatureGrid
from .geometry import Aabb, SceneBounds
from .renderer import ColorHeads, MlpParams, RenderSettings, SceneState
from .sampler import OccupancyGrid

MAGIC = b"LNERFCK1"
VERSION = 1


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, *vals):
        self.buf.write(struct.pack(f"<{len(vals)}I", *[int(v) for v in vals]))

    def f64(self, *vals):
        self.buf.write(struct.pack(f"<{len(vals)}d", *[float(v) for v in vals]))

    def f32_array(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def raw(self, data: bytes):
        self.buf.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n=1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else list(vals)

    def f64(self, n=1):
        vals = struct.unpack(f"<{n}d", self.take(8 * n))
        return vals[0] if n == 1 else np.array(vals)

    def f32_array(self, count: int, dtype):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(dtype)


def _write_dense(w: _Writer, grid):
    w.u32(grid.dims, *grid.resolution)
    w.f32_array(grid.raw)


def _write_hash(w: _Writer, g: HashFeatureGrid):
    w.u32(g.dims, g.levels, g.features_per_level, g.table_size, g.base_resolution)
    w.f64(g.growth_factor)
    w.f32_array(g.tables)


def encode_checkpoint(state: SceneState) -> bytes:
    w = _Writer()
    w.raw(MAGIC)
    w.u32(VERSION, 1 if state.heads.decomposed else 0)
    b, st = state.bounds, state.settings
    w.f64(*b.fg.min, *b.fg.max, *b.enlargement)
    w.f64(state.occupancy.step if st.step is None else st.step)
    w.u32(st.n_bg, 1 if st.background else 0)
    w.f64(st.min_transmittance, *st.fill)
    _write_dense(w, state.fg_density)
    _write_dense(w, state.bg_density)
    _write_hash(w, state.fg_color)
    _write_hash(w, state.bg_color)
    heads = [state.heads.vd] + ([state.heads.vi] if state.heads.decomposed else [])
    w.u32(len(heads), state.heads.n_freqs)
    for mlp in heads:
        w.u32(len(mlp.weights))
        for wt, bias in zip(mlp.weights, mlp.biases):
            w.u32(*wt.shape)
            w.f32_array(wt)
            w.f32_array(bias)
    occ = state.occupancy
    w.u32(*occ.resolution)
    w.f64(occ.step)
    w.u32(occ.update_interval)
    w.f64(occ.decay, occ.occ_threshold)
    w.f32_array(occ.ema)
    w.raw(np.packbits(occ.bits).tobytes())
    return w.buf.getvalue()


def save_checkpoint(path, state: SceneState) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(state))


def _read_dense(r: _Reader, dims: int, dtype):
    d = r.u32()
    if d != dims:
        raise FormatError(f"expected a {dims}-D density grid, found {d}-D")
    res = np.array(r.u32(d), dtype=np.int64)
    return res, r.f32_array(int(np.prod(res)), dtype)


def _read_hash(r: _Reader, dtype) -> HashFeatureGrid:
    dims, levels, feats, tsize, base = r.u32(5)
    growth = r.f64()
    if dims not in (3, 4) or tsize == 0 or tsize & (tsize - 1):
        raise FormatError("bad hash grid metadata")
    tables = r.f32_array(levels * tsize * feats, dtype).reshape(levels * tsize, feats)
    return HashFeatureGrid(dims, levels, feats, tsize, base, growth, dtype=dtype, tables=tables)


def decode_checkpoint(data: bytes, dtype=np.float32) -> SceneState:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, flags = r.u32(2)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fg_min, fg_max, enl = r.f64(3), r.f64(3), r.f64(3)
    step = r.f64()
    n_bg, background = r.u32(2)
    min_trans = r.f64()
    fill = tuple(float(v) for v in r.f64(3))
    try:
        bounds = SceneBounds.from_fg(Aabb(fg_min, fg_max), enl)
    except ValueError as exc:
        raise FormatError(f"bad scene bounds: {exc}") from None
    res, raw = _read_dense(r, 3, dtype)
    fg = DensityGrid(bounds.fg, res, dtype=dtype)
    fg.raw = raw
    res, raw = _read_dense(r, 4, dtype)
    bg = BackgroundDensityGrid(res, dtype=dtype)
    bg.raw = raw
    fg_color = _read_hash(r, dtype)
    bg_color = _read_hash(r, dtype)
    n_heads, n_freqs = r.u32(2)
    if n_heads != (2 if flags & 1 else 1):
        raise FormatError("head count does not match checkpoint flags")
    mlps = []
    for _ in range(n_heads):
        ws, bs = [], []
        for _ in range(r.u32()):
            fan_in, fan_out = r.u32(2)
            ws.append(r.f32_array(fan_in * fan_out, dtype).reshape(fan_in, fan_out))
            bs.append(r.f32_array(fan_out, dtype))
        mlps.append(MlpParams(ws, bs))
    heads = ColorHeads(mlps[0], mlps[1] if n_heads == 2 else None, n_freqs)
    occ_res = r.u32(3)
    occ_step = r.f64()
    interval = r.u32()
    decay, thr = r.f64(2)
    occ = OccupancyGrid(bounds, occ_res, step=occ_step, update_interval=interval, decay=decay,
                        occ_threshold=thr)
    occ.ema = r.f32_array(occ.n_voxels, np.float32)
    occ.bits = np.unpackbits(np.frombuffer(r.take((occ.n_voxels + 7) // 8), dtype=np.uint8),
                             count=occ.n_voxels).astype(bool)
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    settings = RenderSettings(step=step, n_bg=n_bg, min_transmittance=min_trans, fill=fill,
                              background=bool(background))
    return SceneState(bounds, fg, bg, fg_color, bg_color, heads, occ, settings)


def load_checkpoint(path, dtype=np.float32) -> SceneState:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), dtype)
