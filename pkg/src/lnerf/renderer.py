"""Color heads, color decomposition and differentiable volume compositing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from . import fields, kernels
from .errors import DomainError
from .fields import (BackgroundDensityGrid, DensityGrid, GradientBuffer, HashFeatureGrid,
                     softplus, softplus_grad)
from .geometry import SceneBounds
from .sampler import OccupancyGrid, SampleBatch, jitter_for, march_rays

_jit = nb.njit(cache=True, nogil=True)


# -- MLPs -------------------------------------------------------------------

@dataclass
class MlpParams:
    """Rectifier MLP; ``weights[i]`` has shape (fan_in, fan_out)."""
    weights: list
    biases: list

    @classmethod
    def init(cls, widths, rng: np.random.Generator, dtype=np.float32, final_bias: float = 0.0) -> "MlpParams":
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            bs.append(np.zeros(fan_out, dtype=dtype))
        ws[-1] *= 0.1
        bs[-1][:] = final_bias
        return cls(ws, bs)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])


def mlp_forward(params: MlpParams, x: np.ndarray, return_cache: bool = False):
    """Affine/rectifier chain with a linear final layer. Accepts one vector or a (n, d) batch."""
    single = np.ndim(x) == 1
    h = np.atleast_2d(x)
    if h.shape[1] != params.weights[0].shape[0]:
        raise DomainError(f"MLP expects inputs of width {params.weights[0].shape[0]}, got {h.shape[1]}")
    cache = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
            cache.append(h)
    out = h[0] if single else h
    return (out, cache) if return_cache else out


def mlp_backward(params: MlpParams, cache: list, upstream: np.ndarray):
    """Returns (parameter gradients as MlpParams, gradient w.r.t. the input batch)."""
    g = np.atleast_2d(upstream)
    if len(cache) != len(params.weights) or cache[0].shape[0] != g.shape[0]:
        raise DomainError("forward cache does not match this network / upstream batch")
    grads = params.zeros_like()
    for i in range(len(params.weights) - 1, -1, -1):
        a = cache[i]
        grads.weights[i] = a.T @ g
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (a > 0)
    return grads, g


# -- color heads ------------------------------------------------------------

def encode_direction(d: np.ndarray, n_freqs: int = 4) -> np.ndarray:
    """sin/cos of 2^k * pi * d for k < n_freqs, laid out [sin(k=0), cos(k=0), sin(k=1), ...]."""
    d = np.atleast_2d(d)
    parts = []
    for k in range(n_freqs):
        arg = (2.0 ** k) * np.pi * d
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ColorHeads:
    vd: MlpParams
    vi: Optional[MlpParams]
    n_freqs: int = 4

    @property
    def decomposed(self) -> bool:
        return self.vi is not None

    @classmethod
    def init(cls, feat_dim: int, hidden: int = 64, layers: int = 2, n_freqs: int = 4,
             decomposed: bool = True, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        hid = [hidden] * layers
        vd_in = feat_dim + 6 * n_freqs
        # decomposed heads start with a near-zero specular term
        vd = MlpParams.init([vd_in] + hid + [3], rng, dtype, final_bias=-4.0 if decomposed else 0.0)
        vi = MlpParams.init([feat_dim] + hid + [3], rng, dtype) if decomposed else None
        return cls(vd, vi, n_freqs)


@dataclass
class HeadTape:
    vd_cache: list
    vi_cache: Optional[list]
    vd_pre: np.ndarray
    vi_pre: Optional[np.ndarray]
    feat_dim: int


def heads_forward(heads: ColorHeads, f: np.ndarray, dirs: np.ndarray, enc: Optional[np.ndarray] = None):
    """Batch color heads. Returns (c_vd, c_vi, c, tape).

    Without decomposition a single view-conditioned head with a logistic output
    produces the whole color, reported as c_vd with c_vi = 0. ``enc`` may carry
    a precomputed direction encoding of ``dirs``.
    """
    if enc is None:
        enc = encode_direction(dirs, heads.n_freqs)
    enc = enc.astype(f.dtype, copy=False)
    vd_pre, vd_cache = mlp_forward(heads.vd, np.concatenate([f, enc], axis=1), return_cache=True)
    if heads.decomposed:
        c_vd = softplus(vd_pre)
        vi_pre, vi_cache = mlp_forward(heads.vi, f, return_cache=True)
        c_vi = logistic(vi_pre)
    else:
        c_vd = logistic(vd_pre)
        vi_pre = vi_cache = None
        c_vi = np.zeros_like(c_vd)
    return c_vd, c_vi, c_vd + c_vi, HeadTape(vd_cache, vi_cache, vd_pre, vi_pre, f.shape[1])


def heads_backward(heads: ColorHeads, tape: HeadTape, d_vd: np.ndarray, d_vi: Optional[np.ndarray]):
    """Backprop gradients on c_vd / c_vi. Returns (vd grads, vi grads or None, d_features)."""
    if heads.decomposed:
        g_vd = d_vd * softplus_grad(tape.vd_pre)
    else:
        s = logistic(tape.vd_pre)
        g_vd = d_vd * s * (1.0 - s)
    vd_grads, d_in = mlp_backward(heads.vd, tape.vd_cache, g_vd.astype(tape.vd_pre.dtype))
    d_f = d_in[:, :tape.feat_dim]
    vi_grads = None
    if heads.decomposed:
        s = logistic(tape.vi_pre)
        vi_grads, d_fi = mlp_backward(heads.vi, tape.vi_cache, (d_vi * s * (1.0 - s)).astype(tape.vi_pre.dtype))
        d_f = d_f + d_fi
    return vd_grads, vi_grads, d_f


HEAD_CHUNK = 1 << 16


def _add_grads(acc: Optional[MlpParams], g: Optional[MlpParams]) -> Optional[MlpParams]:
    if acc is None or g is None:
        return g if acc is None else acc
    for a, b in zip(acc.arrays(), g.arrays()):
        a += b
    return acc


def heads_forward_chunked(heads: ColorHeads, f: np.ndarray, enc: np.ndarray, chunk: int = HEAD_CHUNK):
    """Colors for many samples without keeping activations. Returns (c_vd, c_vi)."""
    n = f.shape[0]
    c_vd = np.empty((n, 3), dtype=f.dtype)
    c_vi = np.empty((n, 3), dtype=f.dtype)
    for s in range(0, n, chunk):
        c_vd[s:s + chunk], c_vi[s:s + chunk], _, _ = heads_forward(heads, f[s:s + chunk], None,
                                                                   enc[s:s + chunk])
    return c_vd, c_vi


def heads_backward_chunked(heads: ColorHeads, f: np.ndarray, enc: np.ndarray, d_vd: np.ndarray,
                           d_vi: np.ndarray, chunk: int = HEAD_CHUNK):
    """Backprop through the heads chunk by chunk, recomputing each chunk's activations."""
    n = f.shape[0]
    d_f = np.empty(f.shape, dtype=np.float64)
    vd_acc = vi_acc = None
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        *_, tape = heads_forward(heads, f[s:e], None, enc[s:e])
        vd_g, vi_g, d_fc = heads_backward(heads, tape, d_vd[s:e], d_vi[s:e])
        vd_acc = _add_grads(vd_acc, vd_g)
        vi_acc = _add_grads(vi_acc, vi_g)
        d_f[s:e] = d_fc
    if vd_acc is None:
        z = heads_forward(heads, f[:0], None, enc[:0])[3]
        vd_acc, vi_acc, _ = heads_backward(heads, z, d_vd[:0], d_vi[:0])
    return vd_acc, vi_acc, d_f


def color_heads(heads: ColorHeads, f, d):
    """Single-sample heads: returns (c_vd, c_vi, c)."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise DomainError("viewing direction must be unit length")
    f = np.atleast_2d(np.asarray(f))
    c_vd, c_vi, c, _ = heads_forward(heads, f, d[None])
    return c_vd[0], c_vi[0], c[0]


# -- compositing --------------------------------------------------------------

@dataclass
class RenderOutput:
    rgb: np.ndarray
    rgb_vd: np.ndarray
    rgb_vi: np.ndarray
    depth: float
    opacity: float
    n_samples: int


@_jit
def _composite(offsets, sigma, delta, t, c_vd, c_vi, weights, trans, rgb_vd, rgb_vi, depth, opacity):
    for r in range(offsets.shape[0] - 1):
        T = 1.0
        for i in range(offsets[r], offsets[r + 1]):
            tau = sigma[i] * delta[i]
            alpha = -np.expm1(-tau)
            w = T * alpha
            trans[i] = T
            weights[i] = w
            for k in range(3):
                rgb_vd[r, k] += w * c_vd[i, k]
                rgb_vi[r, k] += w * c_vi[i, k]
            depth[r] += w * t[i]
            opacity[r] += w
            T *= np.exp(-tau)


@_jit
def _composite_backward(offsets, sigma, delta, c, weights, trans, d_rgb, d_sigma, d_c):
    for r in range(offsets.shape[0] - 1):
        s, e = offsets[r], offsets[r + 1]
        after = 0.0
        for i in range(e - 1, s - 1, -1):
            cg = 0.0
            for k in range(3):
                cg += c[i, k] * d_rgb[r, k]
                d_c[i, k] = weights[i] * d_rgb[r, k]
            t_next = trans[i] - weights[i]
            d_sigma[i] = delta[i] * (t_next * cg - after)
            after += weights[i] * cg


@_jit
def _keep_until_opaque(offsets, sigma, delta, min_trans, keep):
    for r in range(offsets.shape[0] - 1):
        T = 1.0
        for i in range(offsets[r], offsets[r + 1]):
            keep[i] = T >= min_trans
            T *= np.exp(-sigma[i] * delta[i])


@dataclass
class CompositeResult:
    rgb: np.ndarray        # clamped
    rgb_raw: np.ndarray    # rgb_vd + rgb_vi + fill, unclamped
    rgb_vd: np.ndarray
    rgb_vi: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    trans: np.ndarray


def composite_batch(offsets, sigma, delta, t, c_vd, c_vi, fill=(0.0, 0.0, 0.0)) -> CompositeResult:
    n = offsets.size - 1
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    delta = np.ascontiguousarray(delta, dtype=np.float64)
    if np.any(sigma < 0) or np.any(delta < 0):
        raise DomainError("compositing needs sigma >= 0 and delta >= 0")
    weights = np.empty_like(sigma)
    trans = np.empty_like(sigma)
    rgb_vd = np.zeros((n, 3))
    rgb_vi = np.zeros((n, 3))
    depth = np.zeros(n)
    opacity = np.zeros(n)
    _composite(offsets, sigma, delta, np.ascontiguousarray(t, dtype=np.float64),
               np.ascontiguousarray(c_vd, dtype=np.float64), np.ascontiguousarray(c_vi, dtype=np.float64),
               weights, trans, rgb_vd, rgb_vi, depth, opacity)
    raw = rgb_vd + rgb_vi + (1.0 - opacity)[:, None] * np.asarray(fill, dtype=np.float64)
    return CompositeResult(np.clip(raw, 0.0, 1.0), raw, rgb_vd, rgb_vi, depth, opacity, weights, trans)


def composite_backward_batch(offsets, sigma, delta, c, res: CompositeResult, d_rgb):
    """Gradients of a loss w.r.t. per-sample sigma and color given d loss / d clamped rgb."""
    d_rgb = np.asarray(d_rgb, dtype=np.float64) * ((res.rgb_raw > 0.0) & (res.rgb_raw < 1.0))
    d_sigma = np.empty(sigma.size)
    d_c = np.empty((sigma.size, 3))
    _composite_backward(offsets, np.ascontiguousarray(sigma, dtype=np.float64),
                        np.ascontiguousarray(delta, dtype=np.float64), np.ascontiguousarray(c, dtype=np.float64),
                        res.weights, res.trans, np.ascontiguousarray(d_rgb), d_sigma, d_c)
    return d_sigma, d_c


def _unpack_samples(samples):
    arr = [tuple(s) for s in samples]
    if not arr:
        return np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))
    sigma = np.array([a[0] for a in arr], dtype=np.float64)
    delta = np.array([a[1] for a in arr], dtype=np.float64)
    t = np.array([a[2] for a in arr], dtype=np.float64)
    c_vd = np.array([a[3] for a in arr], dtype=np.float64).reshape(-1, 3)
    c_vi = np.array([a[4] for a in arr], dtype=np.float64).reshape(-1, 3)
    return sigma, delta, t, c_vd, c_vi


def composite(samples, fill=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Composite one ray. ``samples`` holds (sigma, delta, t, c_vd, c_vi) tuples in ray order."""
    sigma, delta, t, c_vd, c_vi = _unpack_samples(samples)
    res = composite_batch(np.array([0, sigma.size]), sigma, delta, t, c_vd, c_vi, fill)
    return RenderOutput(res.rgb[0], res.rgb_vd[0], res.rgb_vi[0], float(res.depth[0]),
                        float(res.opacity[0]), int(sigma.size))


def composite_backward(samples, upstream_rgb, fill=(0.0, 0.0, 0.0)):
    """Returns (d sigma_i, d c_i) for one ray."""
    sigma, delta, t, c_vd, c_vi = _unpack_samples(samples)
    offsets = np.array([0, sigma.size])
    res = composite_batch(offsets, sigma, delta, t, c_vd, c_vi, fill)
    return composite_backward_batch(offsets, sigma, delta, c_vd + c_vi, res,
                                    np.asarray(upstream_rgb, dtype=np.float64)[None])


# -- scene state and batched rendering ----------------------------------------

@dataclass
class RenderSettings:
    step: Optional[float] = None      # None: fg diagonal / 1024
    n_bg: int = 64
    min_transmittance: float = 1e-4
    fill: tuple = (0.0, 0.0, 0.0)
    background: bool = True           # False: no background model (rays stop at the fg box)
    chunk: int = 4096


@dataclass
class SceneState:
    bounds: SceneBounds
    fg_density: DensityGrid
    bg_density: BackgroundDensityGrid
    fg_color: HashFeatureGrid
    bg_color: HashFeatureGrid
    heads: ColorHeads
    occupancy: OccupancyGrid
    settings: RenderSettings = field(default_factory=RenderSettings)

    def density(self, x: np.ndarray) -> np.ndarray:
        """Activated density at world points; zero outside the background box (or beyond fg without bg)."""
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
        return kernels.density_field(x, self.bounds.fg.min, self.bounds.fg.max, self.fg_density.raw,
                                     self.fg_density.resolution, self.bounds.bg.min, self.bounds.bg.max,
                                     self.bg_density.raw, self.bg_density.resolution, self.settings.background)


@dataclass
class RenderTape:
    samples: SampleBatch
    dirs: np.ndarray
    raw: np.ndarray
    sigma: np.ndarray
    x_fg: np.ndarray
    x_bg: np.ndarray
    f: np.ndarray
    enc: np.ndarray
    c_vd: np.ndarray
    c_vi: np.ndarray
    comp: CompositeResult


@dataclass
class RenderBatch:
    rgb: np.ndarray
    rgb_vd: np.ndarray
    rgb_vi: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    n_samples: np.ndarray
    tape: Optional[RenderTape] = None

    def output(self, i: int) -> RenderOutput:
        return RenderOutput(self.rgb[i], self.rgb_vd[i], self.rgb_vi[i], float(self.depth[i]),
                            float(self.opacity[i]), int(self.n_samples[i]))


def _features(state: SceneState, pos: np.ndarray, is_bg: np.ndarray):
    dtype = state.fg_color.tables.dtype
    f = np.empty((pos.shape[0], state.fg_color.output_dim), dtype=dtype)
    x_fg = fields.fg_unit_coords(state.bounds, pos[~is_bg])
    xw = fields.warp_unchecked(state.bounds.normalize(pos[is_bg]))
    x_bg = fields.bg_unit_coords(xw)
    if x_fg.shape[0]:
        f[~is_bg] = fields.encode_batch(state.fg_color, x_fg)
    if x_bg.shape[0]:
        f[is_bg] = fields.encode_batch(state.bg_color, x_bg)
    return f, x_fg, x_bg


def render_chunk(state: SceneState, origins: np.ndarray, dirs: np.ndarray, train: bool = False,
                 jitter: Optional[np.ndarray] = None) -> RenderBatch:
    st = state.settings
    batch = march_rays(origins, dirs, state.bounds, state.occupancy, step=st.step,
                       n_bg=st.n_bg if st.background else 0, jitter=jitter)
    raw = fields.density_raw_batch(state.bounds, state.fg_density, state.bg_density,
                                   batch.positions, batch.is_bg)
    sigma = softplus(raw.astype(np.float64))
    if st.min_transmittance > 0 and batch.sample_count:
        keep = np.empty(batch.sample_count, dtype=np.bool_)
        _keep_until_opaque(batch.offsets, sigma, batch.delta, st.min_transmittance, keep)
        if not keep.all():
            batch = batch.select(keep)
            raw, sigma = raw[keep], sigma[keep]
    sdirs = dirs[batch.ray_ids]
    f, x_fg, x_bg = _features(state, batch.positions, batch.is_bg)
    enc = encode_direction(dirs, state.heads.n_freqs).astype(f.dtype)[batch.ray_ids]
    c_vd, c_vi = heads_forward_chunked(state.heads, f, enc)
    comp = composite_batch(batch.offsets, sigma, batch.delta, batch.t, c_vd, c_vi, st.fill)
    tape = RenderTape(batch, sdirs, raw, sigma, x_fg, x_bg, f, enc, c_vd, c_vi, comp) if train else None
    return RenderBatch(comp.rgb, comp.rgb_vd, comp.rgb_vi, comp.depth, comp.opacity,
                       np.diff(batch.offsets), tape)


def render_rays(state: SceneState, origins: np.ndarray, dirs: np.ndarray, mode: str = "eval",
                seed: int = 0, iteration: int = 0, ray_ids: Optional[np.ndarray] = None) -> RenderBatch:
    """Render rays. ``train`` mode jitters marching and keeps one tape for backprop (single chunk)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    if mode == "train":
        ids = np.arange(origins.shape[0]) if ray_ids is None else ray_ids
        return render_chunk(state, origins, dirs, train=True, jitter=jitter_for(seed, iteration, ids))
    if mode != "eval":
        raise DomainError(f"unknown render mode {mode!r}")
    parts = [render_chunk(state, origins[s:s + state.settings.chunk], dirs[s:s + state.settings.chunk])
             for s in range(0, origins.shape[0], state.settings.chunk)]
    if not parts:
        z3 = np.zeros((0, 3))
        return RenderBatch(z3, z3, z3, np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return RenderBatch(cat("rgb"), cat("rgb_vd"), cat("rgb_vi"), cat("depth"), cat("opacity"), cat("n_samples"))


@dataclass
class SceneGrads:
    fg_density: GradientBuffer
    bg_density: GradientBuffer
    fg_color: GradientBuffer
    bg_color: GradientBuffer
    vd: Optional[MlpParams] = None
    vi: Optional[MlpParams] = None

    @classmethod
    def for_state(cls, state: SceneState) -> "SceneGrads":
        dt = state.fg_density.raw.dtype
        return cls(GradientBuffer(state.fg_density.n_vertices, 1, dt),
                   GradientBuffer(state.bg_density.n_vertices, 1, dt),
                   GradientBuffer(state.fg_color.tables.shape[0], state.fg_color.features_per_level,
                                  state.fg_color.tables.dtype),
                   GradientBuffer(state.bg_color.tables.shape[0], state.bg_color.features_per_level,
                                  state.bg_color.tables.dtype))

    def reset(self) -> None:
        for buf in (self.fg_density, self.bg_density, self.fg_color, self.bg_color):
            buf.reset()
        self.vd = self.vi = None


def backward_rays(state: SceneState, tape: RenderTape, d_rgb: np.ndarray, d_cvd_extra: Optional[np.ndarray],
                  grads: SceneGrads) -> None:
    """Accumulate parameter gradients given d loss / d rgb per ray and an extra per-sample c_vd gradient."""
    b = tape.samples
    c = tape.c_vd + tape.c_vi
    d_sigma, d_c = composite_backward_batch(b.offsets, tape.sigma, b.delta, c, tape.comp, d_rgb)
    d_vd = d_c if d_cvd_extra is None else d_c + d_cvd_extra
    vd_g, vi_g, d_f = heads_backward_chunked(state.heads, tape.f, tape.enc, d_vd, d_c)
    grads.vd = vd_g
    grads.vi = vi_g
    fg = ~b.is_bg
    if tape.x_fg.shape[0]:
        fields.encode_backward_batch(state.fg_color, tape.x_fg, d_f[fg], grads.fg_color)
    if tape.x_bg.shape[0]:
        fields.encode_backward_batch(state.bg_color, tape.x_bg, d_f[b.is_bg], grads.bg_color)
    d_raw = d_sigma * softplus_grad(tape.raw.astype(np.float64))
    fields.density_backward_batch(state.bounds, state.fg_density, state.bg_density, b.positions, b.is_bg,
                                  d_raw, grads.fg_density, grads.bg_density)
