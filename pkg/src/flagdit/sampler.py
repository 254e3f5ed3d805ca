"""Euler integration of the flow ODE on a shifted time grid.

Sampling starts from noise at t=0 and integrates ``dx = v(x, t) dt`` to t=1.
Sampling at a larger geometry than the model was trained on also rescales the
rotary base (NTK), scales the attention logits, and uses the shifted grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .codec import Layout, patchify, unpatchify
from .model import UNCOND_ID, ForwardOptions
from .rope import ntk_scale_base


class SamplerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    shift: float = 6.0
    cfg_scale: float = 4.0
    extrapolation_scale: float | None = None  # None = derive from sequence lengths
    proportional_attention: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise SamplerConfigError(f"steps must be >= 1, got {self.steps}")
        if self.shift < 1:
            raise SamplerConfigError(f"time shift m must be >= 1, got {self.shift}")
        if self.cfg_scale < 0:
            raise SamplerConfigError(f"cfg scale must be >= 0, got {self.cfg_scale}")
        if self.extrapolation_scale is not None and self.extrapolation_scale < 1:
            raise SamplerConfigError("extrapolation scale must be >= 1")


def time_shift(t, m: float):
    """Map a time on the training-resolution schedule to the matching-SNR time.

    ``t / (m - m t + t)``; the identity at ``m = 1``.
    """
    if m < 1:
        raise SamplerConfigError(f"time shift m must be >= 1, got {m}")
    t = np.asarray(t, dtype=np.float64)
    return t / (m - m * t + t)


def make_time_grid(steps: int, m: float = 1.0) -> np.ndarray:
    if steps < 1:
        raise SamplerConfigError(f"steps must be >= 1, got {steps}")
    grid = time_shift(np.arange(steps + 1, dtype=np.float64) / steps, m)
    grid[0], grid[-1] = 0.0, 1.0
    return grid


def snr_pooled_noise_std(m: int, trials: int, rng: np.random.Generator) -> float:
    """Std of ``m x m`` average-pooled unit Gaussians, by Monte Carlo."""
    if m < 1 or int(m) != m:
        raise ValueError(f"pooling factor must be a positive integer, got {m}")
    m = int(m)
    pooled = rng.standard_normal((trials, m * m)).mean(axis=1)
    return float(pooled.std())


def cfg_velocity(v_cond, v_uncond, w: float):
    """``v_uncond + w (v_cond - v_uncond)``."""
    v_cond, v_uncond = np.asarray(v_cond), np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shapes differ: {v_cond.shape} vs {v_uncond.shape}")
    if w == 1:
        return v_cond
    if w == 0:
        return v_uncond
    return v_uncond + np.asarray(w, dtype=v_cond.dtype) * (v_cond - v_uncond)


def proportional_scale(l_train: int, l_infer: int) -> float:
    """``sqrt(log_{l_train} l_infer)``, never below 1."""
    if l_train <= 1:
        raise ValueError(f"training length must exceed 1, got {l_train}")
    if l_infer < 1:
        raise ValueError(f"inference length must be >= 1, got {l_infer}")
    if l_infer <= l_train:
        return 1.0
    return math.sqrt(math.log(l_infer) / math.log(l_train))


def _dtype(model):
    return getattr(model, "dtype", np.float32)


def draw_noise(model, layout: Layout, rng: np.random.Generator) -> np.ndarray:
    c = model.config
    shape = (layout.height, layout.width, layout.frames, c.channels)
    return rng.standard_normal(shape).astype(_dtype(model))


def _as_prompt(prompt) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(prompt, dtype=np.int64))
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("a prompt is a non-empty list of vocab ids")
    return ids


def guided_velocity(model, x, layout, t, prompt, cfg: SamplerConfig,
                    opts: ForwardOptions | None = None,
                    uncond_opts: ForwardOptions | None = None) -> np.ndarray:
    """Velocity for patch payloads ``x [B, N, D]`` with classifier-free guidance."""
    opts = opts or ForwardOptions()
    B = x.shape[0]
    tt = np.full(B, t, dtype=np.float64)
    ids = np.asarray(prompt, dtype=np.int64)
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (B, ids.size))
    v_c = model.predict(x, layout, tt, ids, opts)
    if cfg.cfg_scale == 1:
        return v_c
    if uncond_opts is None:
        uncond_opts = replace(opts, text_mask=None)
    v_u = model.predict(x, layout, tt, np.full((B, 1), UNCOND_ID), uncond_opts)
    return cfg_velocity(v_c, v_u, cfg.cfg_scale)


def integrate(model, x: np.ndarray, layout: Layout, times: np.ndarray, prompt,
              cfg: SamplerConfig, opts: ForwardOptions | None = None,
              velocity=None) -> np.ndarray:
    """Explicit Euler over ``times`` for patch payloads ``x [B, N, D]``.

    ``velocity(x, t)`` overrides the model call (used by the applications to
    thread per-step state through the forward pass).
    """
    if velocity is None:
        def velocity(x_, t_):
            return guided_velocity(model, x_, layout, t_, prompt, cfg, opts)
    x = np.array(x, copy=True)
    for t0, t1 in zip(times[:-1], times[1:]):
        v = velocity(x, float(t0))
        x = x + (np.asarray(t1 - t0, dtype=x.dtype) * v).astype(x.dtype)
    return x


def grid_to_patches(grid: np.ndarray, layout: Layout) -> np.ndarray:
    p = patchify(grid, layout.patch)
    return p.reshape(1, layout.num_patches, p.shape[-1])


def patches_to_grid(x: np.ndarray, layout: Layout, channels: int) -> np.ndarray:
    p = x.reshape(layout.frames, layout.rows, layout.cols, -1)
    return unpatchify(p, layout.patch, channels)


def euler_solve(model, layout: Layout, prompt, cfg: SamplerConfig | None = None,
                rng: np.random.Generator | None = None, *, noise: np.ndarray | None = None,
                opts: ForwardOptions | None = None) -> np.ndarray:
    """Sample one ``[H, W, T, C]`` grid at ``layout`` from noise.

    ``noise`` (a grid) overrides drawing from ``rng``.
    """
    cfg = cfg or SamplerConfig()
    prompt = _as_prompt(prompt)
    if layout.patch != model.config.patch_size:
        raise ValueError(f"layout patch {layout.patch} != model patch {model.config.patch_size}")
    if noise is None:
        noise = draw_noise(model, layout, rng if rng is not None else np.random.default_rng())
    x = grid_to_patches(noise, layout)
    times = make_time_grid(cfg.steps, cfg.shift)
    x = integrate(model, x, layout, times, prompt, cfg, opts)
    return patches_to_grid(x, layout, model.config.channels)


def extrapolation_options(model, layout: Layout, cfg: SamplerConfig,
                          base: ForwardOptions | None = None) -> ForwardOptions:
    """Rotary base and attention scale for sampling at ``layout``."""
    c = model.config
    l_train = c.train_layout().length
    l_infer = layout.length
    s = cfg.extrapolation_scale if cfg.extrapolation_scale is not None else l_infer / l_train
    rope_base = ntk_scale_base(c.rope_base, s, c.head_dim) if s > 1 else c.rope_base
    prop = proportional_scale(l_train, l_infer) if cfg.proportional_attention else 1.0
    return replace(base or ForwardOptions(), rope_base=rope_base, prop_scale=prop)


def extrapolate_sample(model, height: int, width: int, frames: int, prompt,
                       cfg: SamplerConfig | None = None,
                       rng: np.random.Generator | None = None, *,
                       noise: np.ndarray | None = None) -> np.ndarray:
    """Tuning-free sampling at an arbitrary geometry.

    Builds the layout, rescales the rotary base by ``s = L'/L`` (sequence
    lengths including special tokens), scales attention logits by
    ``sqrt(log_L L')`` and integrates on the shifted grid.  Weights are not
    touched.
    """
    cfg = cfg or SamplerConfig()
    layout = Layout(height, width, frames, model.config.patch_size)
    opts = extrapolation_options(model, layout, cfg)
    return euler_solve(model, layout, prompt, cfg, rng, noise=noise, opts=opts)
