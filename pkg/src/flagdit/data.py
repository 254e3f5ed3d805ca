"""Synthetic datasets: a 2-D Gaussian mixture and labelled pattern images.

Labels double as toy prompt ids; id 0 is reserved for the unconditional
prompt, so class ``k`` is prompted with ``k + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATTERN_CLASSES = ("h-stripes", "v-stripes", "checker", "disk", "gradient")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "patterns"  # "gauss2d" | "patterns"
    n: int = 10000
    modes: int = 1
    radius: float = 0.0
    sigma: float = 0.1
    size: int = 16
    period: int = 4
    jitter: bool = True
    seed: int = 0
    extra_sizes: tuple = ()  # other square sizes mixed in per batch

    def __post_init__(self):
        object.__setattr__(self, "extra_sizes", tuple(int(z) for z in self.extra_sizes))
        if any(z < 1 for z in self.extra_sizes):
            raise ValueError("extra_sizes must be positive")
        if self.extra_sizes and self.kind != "patterns":
            raise ValueError("extra_sizes only applies to pattern data")
        if self.kind not in ("gauss2d", "patterns"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n < 1 or self.modes < 1:
            raise ValueError("n and modes must be positive")
        if self.period < 2:
            raise ValueError("period must be >= 2")


def make_2d_mixture(n: int, modes: int, radius: float, seed: int = 0, sigma: float = 0.1):
    """``n`` points from ``modes`` isotropic Gaussians on a circle.

    Returns ``(points [n, 2], labels [n])``; mode ``k`` sits at angle
    ``2 pi k / modes``.
    """
    if n < 1 or modes < 1:
        raise ValueError("n and modes must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, modes, size=n)
    centers = mixture_centers(modes, radius)
    points = centers[labels] + sigma * rng.standard_normal((n, 2))
    return points.astype(np.float32), labels


def mixture_centers(modes: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def points_to_grids(points: np.ndarray) -> np.ndarray:
    """``[n, 2]`` points -> ``[n, 1, 1, 1, 2]`` single-patch grids."""
    return np.asarray(points, dtype=np.float32).reshape(-1, 1, 1, 1, 2)


def make_pattern_image(cls: str, height: int, width: int, period: int = 4,
                       seed: int | None = None, jitter: bool = False):
    """A single-channel ``[H, W, 1, 1]`` pattern in [-1, 1] and its label id.

    With ``jitter`` the stripe/checker phase and the disk centre are drawn
    from ``seed``; otherwise the pattern is canonical.
    """
    if cls not in PATTERN_CLASSES:
        raise ValueError(f"unknown pattern class {cls!r}; choose from {PATTERN_CLASSES}")
    if period < 2:
        raise ValueError(f"period must be >= 2, got {period}")
    rng = np.random.default_rng(seed)
    dy = dx = 0
    if jitter:
        dy, dx = (int(v) for v in rng.integers(0, period, size=2))
    y, x = np.mgrid[0:height, 0:width]
    half = period / 2
    if cls == "h-stripes":
        img = np.where(((y + dy) // half) % 2 == 0, 1.0, -1.0)
    elif cls == "v-stripes":
        img = np.where(((x + dx) // half) % 2 == 0, 1.0, -1.0)
    elif cls == "checker":
        img = np.where((((x + dx) // half) + ((y + dy) // half)) % 2 == 0, 1.0, -1.0)
    elif cls == "disk":
        cy, cx = (height - 1) / 2, (width - 1) / 2
        if jitter:
            cy += rng.uniform(-1, 1)
            cx += rng.uniform(-1, 1)
        r = 0.3 * min(height, width)
        img = np.where((y - cy) ** 2 + (x - cx) ** 2 <= r * r, 1.0, -1.0)
    else:
        img = -1.0 + 2.0 * x / max(width - 1, 1)
    label = PATTERN_CLASSES.index(cls) + 1
    return img.astype(np.float32).reshape(height, width, 1, 1), label


def dominant_frequency(img: np.ndarray) -> tuple[int, int]:
    """Folded ``(ky, kx)`` bin of the largest non-DC FFT magnitude."""
    img = np.asarray(img, dtype=np.float64).reshape(img.shape[0], img.shape[1])
    H, W = img.shape
    mag = np.abs(np.fft.fft2(img - img.mean()))
    mag[0, 0] = 0.0
    ky, kx = np.unravel_index(int(np.argmax(mag)), mag.shape)
    return int(min(ky, H - ky)), int(min(kx, W - kx))


def classify_pattern(img: np.ndarray, stripe_cutoff: float = 0.125,
                     ramp_ratio: float = 0.6) -> str:
    """Closed-form pattern classifier.

    The dominant frequency separates periodic classes (high frequency along
    rows, columns or both).  Low-frequency images are a ramp when a single
    column profile explains most of the variance, otherwise a disk.
    """
    img = np.asarray(img, dtype=np.float64)
    img = img.reshape(img.shape[0], img.shape[1])
    H, W = img.shape
    ky, kx = dominant_frequency(img)
    fy, fx = ky / H, kx / W
    if fy > stripe_cutoff and fx > stripe_cutoff:
        return "checker"
    if fy > stripe_cutoff:
        return "h-stripes"
    if fx > stripe_cutoff:
        return "v-stripes"
    total = img.var()
    if total == 0:
        return "disk"
    col_profile = img.mean(axis=0)
    return "gradient" if col_profile.var() / total > ramp_ratio else "disk"


class Dataset:
    """Minibatch source: ``sample(rng, batch) -> (grids [B,H,W,T,C], label ids [B])``."""

    def sample(self, rng: np.random.Generator, batch: int):
        raise NotImplementedError

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        raise NotImplementedError


class MixtureDataset(Dataset):
    def __init__(self, n: int = 10000, modes: int = 1, radius: float = 0.0,
                 seed: int = 0, sigma: float = 0.1):
        pts, labels = make_2d_mixture(n, modes, radius, seed, sigma)
        self.points = pts
        self.grids = points_to_grids(pts)
        self.labels = labels + 1

    @property
    def geometry(self):
        return (1, 1, 1, 2)

    def sample(self, rng, batch):
        idx = rng.integers(0, len(self.grids), size=batch)
        return self.grids[idx], self.labels[idx]


class PatternDataset(Dataset):
    def __init__(self, size: int = 16, n: int = 2000, period: int = 4,
                 jitter: bool = True, seed: int = 0, classes=PATTERN_CLASSES):
        rng = np.random.default_rng(seed)
        self.size = size
        imgs, labels = [], []
        for i in range(n):
            cls = classes[i % len(classes)]
            img, label = make_pattern_image(cls, size, size, period,
                                            seed=int(rng.integers(1 << 31)), jitter=jitter)
            imgs.append(img)
            labels.append(label)
        self.grids = np.stack(imgs)
        self.labels = np.asarray(labels)

    @property
    def geometry(self):
        return (self.size, self.size, 1, 1)

    def sample(self, rng, batch):
        idx = rng.integers(0, len(self.grids), size=batch)
        return self.grids[idx], self.labels[idx]


class MixedSizeDataset(Dataset):
    """Each batch comes from one member, chosen uniformly.  The first member
    sets the reference geometry."""

    def __init__(self, members):
        if not members:
            raise ValueError("MixedSizeDataset needs at least one member")
        self.members = list(members)

    @property
    def geometry(self):
        return self.members[0].geometry

    def sample(self, rng, batch):
        k = int(rng.integers(len(self.members))) if len(self.members) > 1 else 0
        return self.members[k].sample(rng, batch)


def build_dataset(spec: SyntheticSpec) -> Dataset:
    if spec.kind == "gauss2d":
        return MixtureDataset(spec.n, spec.modes, spec.radius, spec.seed, spec.sigma)
    main = PatternDataset(spec.size, spec.n, spec.period, spec.jitter, spec.seed)
    if not spec.extra_sizes:
        return main
    extra = [PatternDataset(z, spec.n, spec.period, spec.jitter, spec.seed + i + 1)
             for i, z in enumerate(spec.extra_sizes)]
    return MixedSizeDataset([main, *extra])
