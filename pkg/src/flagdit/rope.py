"""Rotary position embedding and NTK-aware base rescaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Function, ShapeError, Tensor

DEFAULT_BASE = 10000.0


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeFrequencies:
    head_dim: int
    base: float
    theta: np.ndarray

    def angles(self, positions) -> np.ndarray:
        """``positions[..., None] * theta`` in float64."""
        return np.asarray(positions, dtype=np.float64)[..., None] * self.theta


def build_freqs(head_dim: int, base: float = DEFAULT_BASE) -> RopeFrequencies:
    if head_dim < 2 or head_dim % 2:
        raise RopeConfigError(f"head_dim must be a positive even number, got {head_dim}")
    if base <= 0:
        raise RopeConfigError(f"rotary base must be positive, got {base}")
    d = np.arange(head_dim // 2, dtype=np.float64)
    theta = base ** (-2.0 * d / head_dim)
    return RopeFrequencies(head_dim, float(base), theta)


def ntk_scale_base(base: float, scale: float, head_dim: int) -> float:
    """Rotary base that stretches the lowest frequency by ``scale``.

    ``base * scale ** (D / (D - 2))``.
    """
    if scale < 1:
        raise RopeConfigError(f"NTK scaling is for extrapolation only (s >= 1), got s={scale}")
    if head_dim <= 2:
        raise RopeConfigError(f"NTK scaling needs head_dim > 2, got {head_dim}")
    return float(base) * float(scale) ** (head_dim / (head_dim - 2))


def rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs ``(x[2d], x[2d+1])`` by the given angles."""
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


class _Rotary(Function):
    def forward(self, x, cos, sin):
        self.cos, self.sin = cos, sin
        return rotate(x, cos, sin)

    def backward(self, grad):
        return (rotate(grad, self.cos, -self.sin),)


def rope_tables(positions, freqs: RopeFrequencies, dtype=np.float32):
    ang = freqs.angles(positions)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(v, position, freqs: RopeFrequencies):
    """Rotate ``v[..., D]`` by ``position * theta``.

    ``position`` broadcasts against ``v.shape[:-1]``: a scalar, or e.g. one
    index per sequence slot.  Works on numpy arrays and on :class:`Tensor`
    (differentiably).
    """
    if v.shape[-1] != freqs.head_dim:
        raise ShapeError(f"trailing dim {v.shape[-1]} != rotary head_dim {freqs.head_dim}")
    if isinstance(v, Tensor):
        cos, sin = rope_tables(position, freqs, v.dtype)
        return _Rotary.apply(v, cos=cos, sin=sin)
    v = np.asarray(v)
    dtype = v.dtype if v.dtype.kind == "f" else np.float64
    cos, sin = rope_tables(position, freqs, dtype)
    return rotate(v.astype(dtype), cos, sin)
