"""Training-free applications built on the sampler.

* compositional generation: each box of patches cross-attends only to its
  own prompt, everything else to the concatenation of all prompts;
* style-consistent batches: non-anchor images also attend to the anchor's
  self-attention keys/values, appended after their own sequence;
* editing: integrate the flow ODE from ``lambda`` to 1 starting at a
  noised (optionally channel-normalized) input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .codec import NEXTFRAME, NEXTLINE, PATCH, Layout
from .flow import interpolate
from .model import ForwardOptions
from .sampler import (
    SamplerConfig,
    _as_prompt,
    draw_noise,
    grid_to_patches,
    guided_velocity,
    integrate,
    make_time_grid,
    patches_to_grid,
)


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class RegionPrompt:
    """A prompt bound to the half-open patch box ``[row0, row1) x [col0, col1)``."""

    prompt: tuple[int, ...]
    box: tuple[int, int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(i) for i in self.prompt))
        object.__setattr__(self, "box", tuple(int(v) for v in self.box))
        r0, c0, r1, c1 = self.box
        if not self.prompt:
            raise RegionError("region prompt is empty")
        if r1 <= r0 or c1 <= c0:
            raise RegionError(f"empty box {self.box}")

    def cells(self) -> set[tuple[int, int]]:
        r0, c0, r1, c1 = self.box
        return {(r, c) for r in range(r0, r1) for c in range(c0, c1)}


@dataclass
class EditRequest:
    grid: np.ndarray
    prompt: list[int]
    start: float = 0.2
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.start <= 1.0:
            raise ValueError(f"edit start time must lie in [0, 1], got {self.start}")


def validate_regions(regions, layout: Layout) -> None:
    if not regions:
        raise RegionError("compose needs at least one region")
    taken: dict[tuple[int, int], int] = {}
    for k, reg in enumerate(regions):
        r0, c0, r1, c1 = reg.box
        if r0 < 0 or c0 < 0 or r1 > layout.rows or c1 > layout.cols:
            raise RegionError(
                f"region {k} box {reg.box} outside the {layout.rows}x{layout.cols} patch grid"
            )
        for cell in reg.cells():
            if cell in taken:
                raise RegionError(f"regions {taken[cell]} and {k} overlap at patch {cell}")
            taken[cell] = k


def region_text_mask(regions, layout: Layout) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated prompt ids and the ``[1, L, Lt]`` cross-attention mask."""
    validate_regions(regions, layout)
    prompt = np.concatenate([np.asarray(r.prompt, dtype=np.int64) for r in regions])
    bounds = np.cumsum([0] + [len(r.prompt) for r in regions])
    mask = np.ones((layout.length, len(prompt)), dtype=bool)
    kinds = layout.kinds()
    slot = 0
    for _ in range(layout.frames):
        for r in range(layout.rows):
            for c in range(layout.cols):
                assert kinds[slot] == PATCH
                for k, reg in enumerate(regions):
                    r0, c0, r1, c1 = reg.box
                    if r0 <= r < r1 and c0 <= c < c1:
                        mask[slot] = False
                        mask[slot, bounds[k] : bounds[k + 1]] = True
                        break
                slot += 1
            assert kinds[slot] == NEXTLINE
            slot += 1
        assert kinds[slot] == NEXTFRAME
        slot += 1
    return prompt, mask[None]


def compose_sample(model, regions, layout: Layout, cfg: SamplerConfig | None = None,
                   rng: np.random.Generator | None = None, *, noise=None, probe=None,
                   opts: ForwardOptions | None = None) -> np.ndarray:
    """Sample with each region's patches reading only their own prompt.

    Self-attention is untouched; the pooled condition is the embedding of the
    concatenated prompt.  ``probe(layer, weights, text_mask)`` observes every
    cross-attention call.
    """
    cfg = cfg or SamplerConfig()
    prompt, mask = region_text_mask(regions, layout)
    if noise is None:
        noise = draw_noise(model, layout, rng if rng is not None else np.random.default_rng())
    opts = replace(opts or ForwardOptions(), text_mask=mask, probe=probe)
    x = integrate(model, grid_to_patches(noise, layout), layout,
                  make_time_grid(cfg.steps, cfg.shift), prompt, cfg, opts)
    return patches_to_grid(x, layout, model.config.channels)


@dataclass
class _AnchorState:
    cond: list = field(default_factory=list)
    uncond: list = field(default_factory=list)


def _anchor_kv(records: list) -> list:
    return [(k, v, np.ones(k.shape[-2], dtype=bool)) for k, v in records]


def style_batch_sample(model, prompts, layout: Layout, cfg: SamplerConfig | None = None,
                       rng: np.random.Generator | None = None, *, share: bool = True,
                       noises=None) -> list[np.ndarray]:
    """Jointly sample a batch whose first element is the style anchor.

    Noise for element ``i`` is the ``i``-th draw from ``rng``, so the anchor
    matches plain sampling with the same seed.
    """
    cfg = cfg or SamplerConfig()
    if len(prompts) < 2:
        raise ValueError("style-consistent sampling needs a batch of at least 2")
    prompts = [_as_prompt(p) for p in prompts]
    if noises is None:
        rng = rng if rng is not None else np.random.default_rng()
        noises = [draw_noise(model, layout, rng) for _ in prompts]
    xs = [grid_to_patches(n, layout) for n in noises]
    times = make_time_grid(cfg.steps, cfg.shift)
    for t0, t1 in zip(times[:-1], times[1:]):
        t = float(t0)
        dt = t1 - t0
        if share:
            anchor = _AnchorState()
            v0 = guided_velocity(model, xs[0], layout, t, prompts[0], cfg,
                                 ForwardOptions(record_kv=anchor.cond),
                                 ForwardOptions(record_kv=anchor.uncond))
            vs = [v0]
            for x, p in zip(xs[1:], prompts[1:]):
                vs.append(guided_velocity(
                    model, x, layout, t, p, cfg,
                    ForwardOptions(anchor_kv=_anchor_kv(anchor.cond)),
                    ForwardOptions(anchor_kv=_anchor_kv(anchor.uncond)),
                ))
        else:
            vs = [guided_velocity(model, x, layout, t, p, cfg) for x, p in zip(xs, prompts)]
        xs = [x + (np.asarray(dt, dtype=x.dtype) * v).astype(x.dtype) for x, v in zip(xs, vs)]
    return [patches_to_grid(x, layout, model.config.channels) for x in xs]


def channel_normalize(grid, eps: float = 1e-6) -> np.ndarray:
    """Zero mean, unit variance per channel (last axis)."""
    g = np.asarray(grid)
    g64 = g.astype(np.float64)
    axes = tuple(range(g.ndim - 1))
    mean = g64.mean(axis=axes, keepdims=True)
    std = g64.std(axis=axes, keepdims=True)
    out = (g64 - mean) / (std + eps)
    return out.astype(g.dtype if g.dtype.kind == "f" else np.float64)


def edit(model, req: EditRequest, cfg: SamplerConfig | None = None,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """Re-noise the input to time ``req.start`` and integrate to t=1."""
    cfg = cfg or SamplerConfig()
    grid = np.asarray(req.grid, dtype=model.dtype)
    H, W, T, C = grid.shape
    if C != model.config.channels:
        raise ValueError(f"input has {C} channels, model expects {model.config.channels}")
    layout = Layout(H, W, T, model.config.patch_size)
    x_in = channel_normalize(grid) if req.normalize else grid
    noise = draw_noise(model, layout, rng if rng is not None else np.random.default_rng())
    lam = float(req.start)
    x_lam = interpolate(x_in, noise, lam)
    full = make_time_grid(cfg.steps, cfg.shift)
    times = np.concatenate([[lam], full[full > lam]])
    x = integrate(model, grid_to_patches(x_lam, layout), layout, times,
                  _as_prompt(req.prompt), cfg)
    return patches_to_grid(x, layout, model.config.channels)
