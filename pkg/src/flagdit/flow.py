"""Interpolation schedules, velocity targets, the CFM loss and time samplers.

Time runs from noise (t=0) to data (t=1): ``x_t = alpha(t) x + beta(t) eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor

T_MIN, T_MAX = 1e-5, 1.0 - 1e-5


@dataclass(frozen=True)
class Schedule:
    name: str
    alpha: Callable[[np.ndarray], np.ndarray]
    beta: Callable[[np.ndarray], np.ndarray]
    d_alpha: Callable[[np.ndarray], np.ndarray]
    d_beta: Callable[[np.ndarray], np.ndarray]


LINEAR = Schedule(
    "linear",
    alpha=lambda t: t,
    beta=lambda t: 1.0 - t,
    d_alpha=lambda t: np.ones_like(t),
    d_beta=lambda t: -np.ones_like(t),
)

VP_COSINE = Schedule(
    "vp_cosine",
    alpha=lambda t: np.sin(0.5 * np.pi * t),
    # cos(pi t / 2) written as a sine so that t=1 gives exactly 0
    beta=lambda t: np.sin(0.5 * np.pi * (1.0 - t)),
    d_alpha=lambda t: 0.5 * np.pi * np.sin(0.5 * np.pi * (1.0 - t)),
    d_beta=lambda t: -0.5 * np.pi * np.sin(0.5 * np.pi * t),
)

SCHEDULES = {s.name: s for s in (LINEAR, VP_COSINE)}


def get_schedule(name: str | Schedule) -> Schedule:
    if isinstance(name, Schedule):
        return name
    try:
        return SCHEDULES[name]
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None


def _bcast_t(t, ndim: int) -> np.ndarray:
    """Per-sample times ``[B]`` broadcast against a ``[B, ...]`` array."""
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def _check(x, eps):
    if np.shape(x) != np.shape(eps):
        raise ValueError(f"data {np.shape(x)} and noise {np.shape(eps)} shapes differ")


def interpolate(x, eps, t, schedule="linear") -> np.ndarray:
    """``alpha(t) x + beta(t) eps``; keeps the dtype of ``x``."""
    _check(x, eps)
    s = get_schedule(schedule)
    x, eps = np.asarray(x), np.asarray(eps)
    tt = _bcast_t(t, x.ndim)
    a = s.alpha(tt).astype(x.dtype)
    b = s.beta(tt).astype(x.dtype)
    return a * x + b * eps


def target_velocity(x, eps, t, schedule="linear") -> np.ndarray:
    _check(x, eps)
    s = get_schedule(schedule)
    x, eps = np.asarray(x), np.asarray(eps)
    if s is LINEAR:
        return x - eps
    tt = _bcast_t(t, x.ndim)
    return s.d_alpha(tt).astype(x.dtype) * x + s.d_beta(tt).astype(x.dtype) * eps


def cfm_loss(v_pred: Tensor, x, eps, t, schedule="linear", patch_mask=None) -> Tensor:
    """Mean squared velocity error over the entries selected by ``patch_mask``.

    ``v_pred``/``x``/``eps`` are ``[B, L, D]`` token arrays; ``patch_mask``
    is ``[B, L]`` (True = PATCH).  Without a mask every entry counts.
    """
    target = target_velocity(x, eps, t, schedule)
    if target.shape != v_pred.shape:
        raise ValueError(f"prediction {v_pred.shape} and target {target.shape} shapes differ")
    if patch_mask is None:
        w = np.ones(target.shape, dtype=v_pred.dtype)
    else:
        m = np.asarray(patch_mask, dtype=bool)
        w = np.broadcast_to(m.reshape(m.shape + (1,) * (target.ndim - m.ndim)), target.shape)
        w = w.astype(v_pred.dtype)
    count = float(w.sum())
    if count == 0:
        raise ValueError("cfm_loss: the patch mask selects no entries")
    diff = (v_pred - Tensor(target.astype(v_pred.dtype))) * Tensor(w)
    return (diff * diff).sum() / count


def sample_t_lognorm(rng: np.random.Generator, size=None):
    """Logistic-normal times: ``sigmoid(z)``, ``z ~ N(0, 1)``, clamped to (0, 1)."""
    z = rng.standard_normal(size)
    t = 1.0 / (1.0 + np.exp(-z))
    return np.clip(t, T_MIN, T_MAX)


def sample_t_uniform(rng: np.random.Generator, size=None):
    return np.clip(rng.random(size), T_MIN, T_MAX)


TIME_SAMPLERS = {"lognorm": sample_t_lognorm, "uniform": sample_t_uniform}


def lognorm_interval_prob(lo: float, hi: float) -> float:
    """Closed-form ``P(lo < t < hi)`` under the logistic-normal sampler."""

    def phi(v):
        return 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))

    def logit(p):
        return math.log(p / (1.0 - p))

    return phi(logit(hi)) - phi(logit(lo))
