"""Losses, optimizer, training step, image metrics and gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import convolve2d

from . import kernels
from .errors import DomainError
from .fields import GradientBuffer
from .renderer import MlpParams, SceneGrads, SceneState, backward_rays, heads_forward, render_rays
from .sampler import update_occupancy

PSNR_CAP = 99.0


@dataclass
class TrainConfig:
    lambda_reg: float = 0.01
    batch_rays: int = 4096
    iterations: int = 2000
    lr_grids: float = 1.0
    lr_color_grids: float = 1.0       # color feature grids; density grids use lr_grids
    lr_mlps: float = 0.01
    lr_final_ratio: float = 0.1
    grid_warmup: int = 200
    clamp_lo: float = 1.0
    clamp_hi: float = 10.0
    eps_weight: float = 1e-12
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise DomainError("lambda_reg must be >= 0")
        if not (self.clamp_lo == 1.0 <= self.clamp_hi):
            raise DomainError("weight clamp must be [1, hi] with hi >= 1")
        if self.batch_rays < 1:
            raise DomainError("batch_rays must be >= 1")


@dataclass
class LossReport:
    iteration: int
    L_p: float
    L_r: float
    total: float
    weight_min: float
    weight_max: float
    weight_mean: float
    samples_per_ray: float


# -- losses -------------------------------------------------------------------

def compute_ray_weights(sq_errors, clamp_lo: float = 1.0, clamp_hi: float = 10.0,
                        eps_weight: float = 1e-12) -> np.ndarray:
    """Per-ray error relative to the batch minimum, clipped to [clamp_lo, clamp_hi]. Treated as constants."""
    err = np.asarray(sq_errors, dtype=np.float64)
    if err.size == 0:
        raise DomainError("empty ray batch")
    ratio = err / (err.min() + eps_weight)
    return np.clip(ratio, clamp_lo, clamp_hi)


def photometric_loss(pred, target, weights):
    """Weighted mean squared error. Returns (loss, d loss / d pred) with weights held constant."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[0] != np.shape(weights)[0]:
        raise DomainError("prediction, target and weight counts differ")
    n = pred.shape[0]
    w = np.asarray(weights, dtype=np.float64)
    diff = pred - target
    loss = float(np.sum(w * np.sum(diff * diff, axis=-1)) / n)
    return loss, (2.0 / n) * w[:, None] * diff


def regularization_loss(c_vd):
    """Mean L1 norm of per-sample view-dependent colors. Returns (loss, subgradient)."""
    c = np.asarray(c_vd, dtype=np.float64).reshape(-1, 3)
    m = c.shape[0]
    if m == 0:
        return 0.0, np.zeros((0, 3))
    return float(np.abs(c).sum() / m), np.sign(c) / m


def total_loss(L_p: float, L_r: float, lam: float) -> float:
    return L_p + lam * L_r


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    moments: dict = field(default_factory=dict)   # name -> (m, v)
    steps: dict = field(default_factory=dict)     # group -> step count

    def _moments(self, name, param):
        if name not in self.moments:
            self.moments[name] = (np.zeros_like(param), np.zeros_like(param))
        m, v = self.moments[name]
        if m.shape != param.shape:
            raise DomainError(f"optimizer state for {name!r} has shape {m.shape}, parameter {param.shape}")
        return m, v


def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float, group: str = "default") -> None:
    """One bias-corrected adaptive-moment update of ``params`` in place.

    A gradient given as a :class:`GradientBuffer` is applied sparsely: rows
    the buffer never touched keep their values and moments. Sparse buffers
    are reset afterwards.
    """
    if set(params) != set(grads):
        raise DomainError("gradients are not aligned with parameters")
    t = state.steps.get(group, 0) + 1
    state.steps[group] = t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state._moments(f"{group}/{name}", p)
        if isinstance(g, GradientBuffer):
            p2 = p.reshape(g.grad.shape)
            if p2.shape != g.grad.shape:
                raise DomainError(f"gradient buffer for {name!r} does not match parameter shape")
            rows = g.touched_rows()
            kernels.sparse_adam(p2, m.reshape(p2.shape), v.reshape(p2.shape), g.grad, rows,
                                lr, state.beta1, state.beta2, state.eps, bc1, bc2)
            g.touched[rows] = False
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise DomainError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


def grid_params(state: SceneState) -> dict:
    return {"fg_density": state.fg_density.raw, "bg_density": state.bg_density.raw,
            "fg_color": state.fg_color.tables, "bg_color": state.bg_color.tables}


def mlp_params(state: SceneState) -> dict:
    out = {}
    heads = {"vd": state.heads.vd, "vi": state.heads.vi}
    for hname, mlp in heads.items():
        if mlp is None:
            continue
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            out[f"{hname}.w{i}"] = w
            out[f"{hname}.b{i}"] = b
    return out


def mlp_grads(grads: SceneGrads) -> dict:
    out = {}
    for hname, mlp in (("vd", grads.vd), ("vi", grads.vi)):
        if mlp is None:
            continue
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            out[f"{hname}.w{i}"] = w
            out[f"{hname}.b{i}"] = b
    return out


# -- metrics -------------------------------------------------------------------

def psnr(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DomainError(f"image shapes differ: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, target, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions of the channel-mean grayscale images (data range 1)."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if a.shape[0] < window or a.shape[1] < window:
        raise DomainError(f"images smaller than the {window}x{window} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    win = gaussian_window(window, sigma)
    filt = lambda x: convolve2d(x, win, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- training step -----------------------------------------------------------

def lr_at(base: float, iteration: int, cfg: TrainConfig, warmup: int = 0) -> float:
    decay = cfg.lr_final_ratio ** (iteration / max(cfg.iterations, 1))
    ramp = min(1.0, (iteration + 1) / warmup) if warmup > 0 else 1.0
    return base * decay * ramp


def sample_pixels(seed: int, iteration: int, n_pixels: int, batch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed, iteration], counter=[0, 0, 0, 1]))
    return rng.integers(0, n_pixels, size=batch)


@dataclass
class RayDataset:
    """Flattened training rays: origins, directions and target colors for every train pixel."""
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return self.colors.shape[0]


def batch_losses(state: SceneState, out, targets: np.ndarray, cfg: TrainConfig, weights=None):
    """Losses and their gradients for a rendered train batch.

    Returns (L_p, L_r, total, weights, d_rgb, d_cvd).
    """
    diff = out.rgb - targets
    sq = np.sum(diff * diff, axis=-1)
    if weights is None:
        weights = compute_ray_weights(sq, cfg.clamp_lo, cfg.clamp_hi, cfg.eps_weight)
    L_p, d_rgb = photometric_loss(out.rgb, targets, weights)
    if state.heads.decomposed and cfg.lambda_reg > 0:
        L_r, d_cvd = regularization_loss(out.tape.c_vd)
        d_cvd = cfg.lambda_reg * d_cvd
    else:
        L_r, d_cvd = (regularization_loss(out.tape.c_vd)[0] if state.heads.decomposed else 0.0), None
    return L_p, L_r, total_loss(L_p, L_r, cfg.lambda_reg), weights, d_rgb, d_cvd


class Trainer:
    """Owns optimizer state and gradient buffers for one scene."""

    def __init__(self, state: SceneState, data: RayDataset, cfg: TrainConfig,
                 update_occ: bool = True):
        self.state = state
        self.data = data
        self.cfg = cfg
        self.opt = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        self.grads = SceneGrads.for_state(state)
        self.update_occ = update_occ

    def train_step(self, iteration: int) -> LossReport:
        cfg = self.cfg
        idx = sample_pixels(cfg.seed, iteration, len(self.data), cfg.batch_rays)
        out = render_rays(self.state, self.data.origins[idx], self.data.dirs[idx], mode="train",
                          seed=cfg.seed, iteration=iteration, ray_ids=idx)
        L_p, L_r, total, w, d_rgb, d_cvd = batch_losses(self.state, out, self.data.colors[idx], cfg)
        self.grads.reset()
        backward_rays(self.state, out.tape, d_rgb, d_cvd, self.grads)
        g = self.grads
        params = grid_params(self.state)
        optimizer_step(self.opt, {k: params[k] for k in ("fg_density", "bg_density")},
                       {"fg_density": g.fg_density, "bg_density": g.bg_density},
                       lr_at(cfg.lr_grids, iteration, cfg, cfg.grid_warmup), group="grids")
        optimizer_step(self.opt, {k: params[k] for k in ("fg_color", "bg_color")},
                       {"fg_color": g.fg_color, "bg_color": g.bg_color},
                       lr_at(cfg.lr_color_grids, iteration, cfg, cfg.grid_warmup), group="color_grids")
        optimizer_step(self.opt, mlp_params(self.state), mlp_grads(g),
                       lr_at(cfg.lr_mlps, iteration, cfg), group="mlps")
        if self.update_occ:
            update_occupancy(self.state.occupancy, self.state.density, iteration + 1, seed=cfg.seed)
        return LossReport(iteration, L_p, L_r, total, float(w.min()), float(w.max()), float(w.mean()),
                          float(out.n_samples.mean()))


def train_step(trainer: Trainer, iteration: int) -> LossReport:
    return trainer.train_step(iteration)


# -- gradient checking ---------------------------------------------------------

@dataclass
class _Probe:
    group: str
    array: np.ndarray
    index: tuple
    analytic: float


def _loss_and_signature(state: SceneState, origins, dirs, targets, cfg: TrainConfig, weights, jitter_seed):
    out = render_rays(state, origins, dirs, mode="train", seed=jitter_seed, iteration=0)
    L_p, L_r, total, *_ = batch_losses(state, out, targets, cfg, weights=weights)
    tape = out.tape
    sig = [tape.comp.rgb_raw > 0.0, tape.comp.rgb_raw < 1.0]
    head_tape = heads_forward(state.heads, tape.f, None, tape.enc)[3]
    for cache in (head_tape.vd_cache, head_tape.vi_cache or []):
        sig += [h > 0 for h in cache[1:]]
    sig.append(tape.samples.offsets)
    return total, sig


def _same(sig_a, sig_b) -> bool:
    return len(sig_a) == len(sig_b) and all(a.shape == b.shape and np.array_equal(a, b)
                                            for a, b in zip(sig_a, sig_b))


def finite_diff_check(state: SceneState, origins, dirs, targets, n_probes: int = 200,
                      cfg: Optional[TrainConfig] = None, step: float = 1e-4, seed: int = 0,
                      floor: float = 1e-6, return_details: bool = False):
    """Max relative error between analytic and central-difference gradients of the total loss.

    Probes are drawn evenly from every parameter group that received a
    gradient. Probes whose perturbation flips a rectifier or clamp branch are
    redrawn, since a central difference across a kink is not a derivative.
    Relative errors use ``floor`` times the largest analytic gradient as the
    smallest denominator, so components that cancel to near zero are judged
    against the resolution of the difference quotient. Requires a float64
    scene.
    """
    cfg = cfg or TrainConfig(batch_rays=len(origins))
    rng = np.random.default_rng(seed)
    saved = state.settings.min_transmittance
    state.settings.min_transmittance = 0.0
    try:
        out = render_rays(state, origins, dirs, mode="train", seed=seed, iteration=0)
        L_p, L_r, total, weights, d_rgb, d_cvd = batch_losses(state, out, targets, cfg)
        grads = SceneGrads.for_state(state)
        backward_rays(state, out.tape, d_rgb, d_cvd, grads)
        pools = []
        for name, arr, buf in (("fg_density", state.fg_density.raw, grads.fg_density),
                               ("bg_density", state.bg_density.raw, grads.bg_density),
                               ("fg_color", state.fg_color.tables, grads.fg_color),
                               ("bg_color", state.bg_color.tables, grads.bg_color)):
            rows = buf.touched_rows()
            if rows.size:
                view = arr.reshape(buf.grad.shape)
                pools.append((name, view, [(r, c) for r in rows for c in range(view.shape[1])],
                              buf.grad))
        for hname, mlp, g in (("vd", state.heads.vd, grads.vd), ("vi", state.heads.vi, grads.vi)):
            if mlp is None:
                continue
            for i in range(len(mlp.weights)):
                pools.append((f"{hname}.w{i}", mlp.weights[i], list(np.ndindex(mlp.weights[i].shape)),
                              g.weights[i]))
                pools.append((f"{hname}.b{i}", mlp.biases[i], list(np.ndindex(mlp.biases[i].shape)),
                              g.biases[i]))
        if not pools or total == 0.0:
            return (0.0, []) if return_details else 0.0
        base_sig = _loss_and_signature(state, origins, dirs, targets, cfg, weights, seed)[1]
        g_scale = max(float(np.max(np.abs(p[3]))) for p in pools)
        denom_floor = max(floor * g_scale, 1e-300)
        worst = 0.0
        details = []
        attempts = 0
        while len(details) < n_probes and attempts < 20 * n_probes:
            attempts += 1
            name, arr, cand, garr = pools[attempts % len(pools)]
            index = cand[rng.integers(len(cand))]
            analytic = float(garr[index])
            orig = arr[index]
            arr[index] = orig + step
            lp, sp = _loss_and_signature(state, origins, dirs, targets, cfg, weights, seed)
            arr[index] = orig - step
            lm, sm = _loss_and_signature(state, origins, dirs, targets, cfg, weights, seed)
            arr[index] = orig
            if not (_same(sp, base_sig) and _same(sm, base_sig)):
                continue
            numeric = (lp - lm) / (2 * step)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), denom_floor)
            details.append((name, index, analytic, numeric, err))
            worst = max(worst, err)
        return (worst, details) if return_details else worst
    finally:
        state.settings.min_transmittance = saved
