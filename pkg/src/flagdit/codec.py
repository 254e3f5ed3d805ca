"""Latent grids <-> unified 1-D token sequences.

A grid of shape ``[H, W, T, C]`` is cut into ``p x p`` patches and laid out
frame by frame, row by row.  Every row of patches is followed by a NEXTLINE
token and every frame by a NEXTFRAME token, so a frame with ``h`` rows of
``w`` patches occupies ``h * (w + 1) + 1`` slots.  Batches of sequences are
right-padded with PAD tokens.

Also holds the on-disk grid format (``LFG1``) and PGM/PPM previews.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PATCH, NEXTLINE, NEXTFRAME, PAD = 0, 1, 2, 3
KIND_NAMES = {PATCH: "PATCH", NEXTLINE: "NEXTLINE", NEXTFRAME: "NEXTFRAME", PAD: "PAD"}

GRID_MAGIC = b"LFG1"
_GRID_HEADER = struct.Struct("<4sIIII")


class LayoutError(ValueError):
    """Grid dimensions are incompatible with the patch size."""


class StructureError(ValueError):
    """A token sequence does not follow its declared layout."""


@dataclass(frozen=True)
class Layout:
    """Geometry of a sequence: grid extents plus patch size."""

    height: int
    width: int
    frames: int
    patch: int

    def __post_init__(self):
        for name in ("height", "width", "frames", "patch"):
            if getattr(self, name) < 1:
                raise LayoutError(f"{name} must be positive, got {getattr(self, name)}")
        if self.height % self.patch or self.width % self.patch:
            raise LayoutError(
                f"H={self.height}, W={self.width} not divisible by patch size p={self.patch}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch

    @property
    def cols(self) -> int:
        return self.width // self.patch

    @property
    def num_patches(self) -> int:
        return self.frames * self.rows * self.cols

    @property
    def length(self) -> int:
        return self.frames * (self.rows * (self.cols + 1) + 1)

    def kinds(self) -> np.ndarray:
        row = [PATCH] * self.cols + [NEXTLINE]
        frame = row * self.rows + [NEXTFRAME]
        return np.array(frame * self.frames, dtype=np.int8)


@dataclass
class TokenSequence:
    kinds: np.ndarray
    payloads: np.ndarray
    layout: Layout
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype=np.int8)
        if self.positions is None:
            self.positions = np.arange(len(self.kinds), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.kinds)


@dataclass
class SequenceBatch:
    """Right-padded batch ready for the model.

    ``tokens`` carries each PATCH payload at its sequence slot (zeros
    elsewhere); ``mask`` is True where a key may be attended.
    """

    kinds: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray
    layouts: list[Layout]

    @property
    def patch_mask(self) -> np.ndarray:
        return self.kinds == PATCH

    def __len__(self) -> int:
        return self.kinds.shape[0]


def layout_for(height: int, width: int, frames: int, patch: int) -> dict:
    """Sequence length and special-token indices for a grid geometry."""
    lay = Layout(height, width, frames, patch)
    kinds = lay.kinds()
    return {
        "length": lay.length,
        "nextline": np.flatnonzero(kinds == NEXTLINE).tolist(),
        "nextframe": np.flatnonzero(kinds == NEXTFRAME).tolist(),
        "num_patches": lay.num_patches,
    }


def patchify(grid: np.ndarray, p: int) -> np.ndarray:
    """``[H, W, T, C]`` -> ``[T, H/p, W/p, p*p*C]``; patch contents row-major.

    Leading batch axes, if any, are carried through unchanged.
    """
    grid = np.asarray(grid)
    if grid.ndim < 4:
        raise LayoutError(f"expected a [H, W, T, C] grid, got shape {grid.shape}")
    *lead, H, W, T, C = grid.shape
    if p < 1 or H % p or W % p:
        raise LayoutError(f"H={H}, W={W} not divisible by patch size p={p}")
    h, w = H // p, W // p
    n = len(lead)
    x = grid.reshape(*lead, h, p, w, p, T, C)
    x = x.transpose(*range(n), n + 4, n, n + 2, n + 1, n + 3, n + 5)
    return x.reshape(*lead, T, h, w, p * p * C)


def unpatchify(patches: np.ndarray, p: int, channels: int) -> np.ndarray:
    T, h, w, D = patches.shape
    if D != p * p * channels:
        raise LayoutError(f"patch dim {D} != p*p*C = {p * p * channels}")
    x = patches.reshape(T, h, w, p, p, channels)
    x = x.transpose(1, 3, 2, 4, 0, 5)
    return x.reshape(h * p, w * p, T, channels)


def encode_sequence(patches: np.ndarray, patch: int = 1) -> TokenSequence:
    """Interleave a patch grid ``[T, h, w, D]`` with NEXTLINE/NEXTFRAME.

    ``patch`` is only recorded in the layout (the payload already has it
    folded into ``D``).
    """
    T, h, w, D = patches.shape
    lay = Layout(h * patch, w * patch, T, patch)
    payloads = np.ascontiguousarray(patches.reshape(T * h * w, D))
    return TokenSequence(lay.kinds(), payloads, lay)


def decode_sequence(seq: TokenSequence) -> np.ndarray:
    """Inverse of :func:`encode_sequence`; trailing PADs are ignored."""
    lay = seq.layout
    kinds = np.asarray(seq.kinds)
    pads = np.flatnonzero(kinds == PAD)
    n = len(kinds)
    if len(pads):
        first = int(pads[0])
        if np.any(kinds[first:] != PAD):
            bad = first + int(np.flatnonzero(kinds[first:] != PAD)[0])
            raise StructureError(f"non-PAD token after padding at index {bad}")
        n = first
    expected = lay.kinds()
    for i in range(max(n, len(expected))):
        got = int(kinds[i]) if i < n else None
        want = int(expected[i]) if i < len(expected) else None
        if got != want:
            raise StructureError(
                f"token {i}: expected {KIND_NAMES.get(want, 'end of sequence')}, "
                f"found {KIND_NAMES.get(got, 'end of sequence')} "
                f"(layout h={lay.rows}, w={lay.cols}, T={lay.frames})"
            )
    payloads = np.asarray(seq.payloads)
    if payloads.shape[0] != lay.num_patches:
        raise StructureError(
            f"{payloads.shape[0]} payload rows for {lay.num_patches} PATCH tokens"
        )
    return payloads.reshape(lay.frames, lay.rows, lay.cols, payloads.shape[-1])


def pad_batch(seqs: Sequence[TokenSequence]) -> SequenceBatch:
    if not seqs:
        raise ValueError("pad_batch needs at least one sequence")
    width = max(len(s) for s in seqs)
    dim = seqs[0].payloads.shape[-1]
    B = len(seqs)
    kinds = np.full((B, width), PAD, dtype=np.int8)
    tokens = np.zeros((B, width, dim), dtype=seqs[0].payloads.dtype)
    for i, s in enumerate(seqs):
        if s.payloads.shape[-1] != dim:
            raise LayoutError("all sequences in a batch need the same payload width")
        kinds[i, : len(s)] = s.kinds
        tokens[i, np.flatnonzero(s.kinds == PATCH)] = s.payloads
    return SequenceBatch(kinds, tokens, kinds != PAD, [s.layout for s in seqs])


def batch_from_patches(patches: np.ndarray, layout: Layout) -> SequenceBatch:
    """Fast path for ``B`` grids sharing one layout: ``[B, N, D]`` payloads."""
    B, N, D = patches.shape
    if N != layout.num_patches:
        raise LayoutError(f"{N} patches do not fit layout with {layout.num_patches}")
    kinds = np.broadcast_to(layout.kinds(), (B, layout.length)).copy()
    tokens = np.zeros((B, layout.length, D), dtype=patches.dtype)
    tokens[:, kinds[0] == PATCH] = patches
    return SequenceBatch(kinds, tokens, np.ones_like(kinds, dtype=bool), [layout] * B)


# --- file formats ----------------------------------------------------------


def write_grid(path: str | Path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 4:
        raise LayoutError(f"expected a [H, W, T, C] grid, got shape {grid.shape}")
    H, W, T, C = grid.shape
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, H, W, T, C))
        fh.write(np.ascontiguousarray(grid).tobytes())


def read_grid(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise ValueError(f"{path}: too short for an LFG1 header")
    magic, H, W, T, C = _GRID_HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
    n = H * W * T * C
    body = raw[_GRID_HEADER.size :]
    if len(body) != 4 * n:
        raise ValueError(f"{path}: payload has {len(body)} bytes, header implies {4 * n}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W, T, C).astype(np.float32)


def write_pnm(path: str | Path, grid: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    """Binary PGM (C=1) or PPM (C=3) preview of frame 0."""
    grid = np.asarray(grid)
    frame = grid[:, :, 0, :]
    C = frame.shape[-1]
    if C not in (1, 3):
        raise LayoutError(f"preview needs 1 or 3 channels, got {C}")
    px = np.clip((frame - lo) / (hi - lo), 0.0, 1.0)
    px = np.round(px * 255).astype(np.uint8)
    H, W = px.shape[:2]
    magic = b"P5" if C == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{W} {H}\n255\n".encode())
        fh.write(px.reshape(H, W, C).tobytes())
