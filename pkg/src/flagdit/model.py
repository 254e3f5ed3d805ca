"""Flag-DiT: a pre-norm diffusion transformer over unified token sequences.

Each block applies adaptive RMSNorm modulation driven by the timestep plus
the pooled prompt embedding, RoPE self-attention with per-head KQ-Norm, a
tanh-gated cross-attention onto the prompt tokens, and a SiLU MLP.  Gates,
modulation outputs and the velocity head start at zero, so a fresh model
predicts zero velocity and ignores the prompt.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .codec import PATCH, Layout, SequenceBatch, batch_from_patches
from .rope import DEFAULT_BASE, apply_rope, build_freqs
from .tensor import Tensor, embedding, matmul, rms_norm, softmax_lastdim

UNCOND_ID = 0


class ConfigError(ValueError):
    pass


@dataclass
class FlagDiTConfig:
    layers: int = 2
    heads: int = 2
    hidden: int = 32
    patch_size: int = 2
    channels: int = 1
    rope_base: float = DEFAULT_BASE
    mlp_ratio: float = 4.0
    vocab_size: int = 16
    freq_dim: int = 256
    norm_eps: float = 1e-6
    # geometry the model is trained at; extrapolation is measured against it
    train_height: int = 16
    train_width: int = 16
    train_frames: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.hidden < 1:
            raise ConfigError("layers, heads and hidden must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide hidden={self.hidden}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim={self.head_dim} must be even for RoPE")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave room for the unconditional id 0")
        if self.freq_dim % 2:
            raise ConfigError("freq_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.hidden * self.mlp_ratio))

    def train_layout(self) -> Layout:
        return Layout(self.train_height, self.train_width, self.train_frames, self.patch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlagDiTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# layers / heads / hidden
PRESETS = {
    "tiny": (2, 2, 32),
    "S": (4, 8, 768),
    "B": (8, 12, 768),
    "L": (12, 24, 1024),
    "XL": (20, 28, 1152),
    "5B": (32, 32, 3072),
    "7B": (32, 32, 4096),
}


def preset(name: str, **overrides) -> FlagDiTConfig:
    try:
        layers, heads, hidden = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}") from None
    heads = overrides.pop("heads", heads)
    if hidden % heads:
        raise ConfigError(
            f"preset {name!r} lists {heads} heads for hidden size {hidden}, which does not "
            f"divide evenly; pass heads=... to pick a compatible head count"
        )
    return FlagDiTConfig(layers=layers, heads=heads, hidden=hidden, **overrides)


@dataclass
class ForwardOptions:
    """Inference-time knobs; the defaults reproduce the training forward pass.

    ``text_mask``  [B, L, Lt] bool: which prompt tokens each query may read.
    ``anchor_kv``  per-layer ``(k, v, key_mask)`` of a reference sequence,
                   pre-RoPE, appended after each sequence's own keys.
    ``record_kv``  list that receives per-layer pre-RoPE ``(k, v)`` arrays.
    ``probe``      called as ``probe(layer, cross_weights, text_mask)``.
    ``logit_probe`` called as ``logit_probe(layer, max_abs_logit, bound)``
                   for self-attention, with the KQ-Norm bound on the logits.
    """

    rope_base: float | None = None
    prop_scale: float = 1.0
    position_offset: int = 0
    text_mask: np.ndarray | None = None
    anchor_kv: list | None = None
    record_kv: list | None = None
    probe: Callable | None = None
    logit_probe: Callable | None = None


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features ``[cos(1000 t w_i), sin(1000 t w_i)]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    w = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = 1000.0 * t[:, None] * w[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def kq_norm(q: Tensor, k: Tensor, q_gain: Tensor, k_gain: Tensor, eps: float = 1e-6):
    """RMS-normalize queries and keys over their trailing (per-head) axis."""
    return rms_norm(q, q_gain, eps), rms_norm(k, k_gain, eps)


def attention_weights(q: Tensor, k: Tensor, scale: float, mask=None) -> Tensor:
    logits = matmul(q, k.transpose(_swap_last(k.ndim))) * scale
    return softmax_lastdim(logits, mask)


def gated_cross_attention(
    self_out: Tensor, q: Tensor, text_k: Tensor, text_v: Tensor, alpha: Tensor,
    text_mask=None, probe=None,
) -> Tensor:
    """``self_out + tanh(alpha) * softmax(q text_k^T / sqrt(d)) text_v``.

    ``q`` is ``[B, H, L, d]``, text keys/values ``[B, H, Lt, d]`` and
    ``alpha`` holds one gate per head.
    """
    if text_k.shape[-2] == 0:
        raise ValueError("cross-attention needs a non-empty prompt; use the unconditional id")
    d = q.shape[-1]
    w = attention_weights(q, text_k, 1.0 / math.sqrt(d), text_mask)
    if probe is not None:
        probe(w.data)
    gate = alpha.tanh().reshape(1, -1, 1, 1)
    return self_out + matmul(w, text_v) * gate


def appended_positions(positions: np.ndarray, count: int) -> np.ndarray:
    """Positions for ``count`` keys appended after a sequence: they continue
    from its last index."""
    return positions[-1] + 1 + np.arange(count, dtype=np.int64)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class FlagDiT:
    def __init__(self, config: FlagDiTConfig | None = None, dtype=np.float32):
        self.config = config or FlagDiTConfig()
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init_params(np.random.default_rng(self.config.seed), np.dtype(dtype))

    # --- parameters ------------------------------------------------------
    def _init_params(self, rng: np.random.Generator, dtype) -> None:
        c = self.config
        D, hd = c.hidden, c.head_dim

        def add(name, arr):
            self.params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

        def xavier(n_in, n_out):
            lim = math.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_in, n_out))

        add("patch_embed.w", xavier(c.patch_dim, D))
        add("patch_embed.b", np.zeros(D))
        add("special_tokens", rng.normal(0.0, 0.02, size=(3, D)))
        add("t_embed.w1", rng.normal(0.0, 0.02, size=(c.freq_dim, D)))
        add("t_embed.b1", np.zeros(D))
        add("t_embed.w2", rng.normal(0.0, 0.02, size=(D, D)))
        add("t_embed.b2", np.zeros(D))
        add("text.table", rng.normal(0.0, 1.0, size=(c.vocab_size, D)))
        add("text.gain", np.ones(D))
        for i in range(c.layers):
            p = f"blocks.{i}."
            for nm in ("wq", "wk", "wv", "wo"):
                add(p + "attn." + nm, xavier(D, D))
            add(p + "attn.bo", np.zeros(D))
            add(p + "attn.q_gain", np.ones(hd))
            add(p + "attn.k_gain", np.ones(hd))
            add(p + "cross.wk", xavier(D, D))
            add(p + "cross.wv", xavier(D, D))
            add(p + "cross.alpha", np.zeros(c.heads))
            add(p + "mod.w", np.zeros((D, 6 * D)))
            add(p + "mod.b", np.zeros(6 * D))
            add(p + "mlp.w1", xavier(D, c.mlp_hidden))
            add(p + "mlp.b1", np.zeros(c.mlp_hidden))
            add(p + "mlp.w2", xavier(c.mlp_hidden, D))
            add(p + "mlp.b2", np.zeros(D))
        add("final.mod.w", np.zeros((D, 2 * D)))
        add("final.mod.b", np.zeros(2 * D))
        add("final.w", np.zeros((D, c.patch_dim)))
        add("final.b", np.zeros(c.patch_dim))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "FlagDiT":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def gate_values(self) -> np.ndarray:
        """``tanh(alpha)`` as a ``[layers, heads]`` array."""
        return np.stack(
            [np.tanh(self.params[f"blocks.{i}.cross.alpha"].data.astype(np.float64))
             for i in range(self.config.layers)]
        )

    @property
    def dtype(self):
        return self.params["final.w"].dtype

    # --- sub-modules -----------------------------------------------------
    def timestep_embedding(self, t) -> Tensor:
        P = self.params
        f = Tensor(timestep_features(t, self.config.freq_dim).astype(self.dtype))
        h = (matmul(f, P["t_embed.w1"]) + P["t_embed.b1"]).silu()
        return matmul(h, P["t_embed.w2"]) + P["t_embed.b2"]

    def toy_text_encode(self, ids) -> tuple[Tensor, Tensor]:
        """Prompt ids ``[B, Lt]`` -> (token embeddings ``[B, Lt, D]``, pooled ``[B, D]``)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[-1] == 0:
            raise ValueError("empty prompt; use [0] for the unconditional prompt")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(
                f"prompt id out of range [0, {self.config.vocab_size}): {ids.ravel().tolist()}"
            )
        P = self.params
        tok = rms_norm(embedding(P["text.table"], ids), P["text.gain"], self.config.norm_eps)
        return tok, tok.mean(axis=1)

    def _embed_tokens(self, batch: SequenceBatch) -> Tensor:
        P = self.params
        x = Tensor(batch.tokens.astype(self.dtype, copy=False))
        patch = matmul(x, P["patch_embed.w"]) + P["patch_embed.b"]
        kinds = batch.kinds.astype(np.int64)
        special_ids = np.where(kinds == PATCH, 0, kinds - 1)
        special = embedding(P["special_tokens"], special_ids)
        pm = (kinds == PATCH)[..., None].astype(self.dtype)
        return patch * Tensor(pm) + special * Tensor(1.0 - pm)

    def _split_heads(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        c = self.config
        return x.reshape(B, L, c.heads, c.head_dim).transpose(0, 2, 1, 3)

    def _attention(self, i, h, text_tok, positions, key_mask, freqs, opts: ForwardOptions):
        P, c = self.params, self.config
        p = f"blocks.{i}."
        B, L, D = h.shape
        q = self._split_heads(matmul(h, P[p + "attn.wq"]))
        k = self._split_heads(matmul(h, P[p + "attn.wk"]))
        v = self._split_heads(matmul(h, P[p + "attn.wv"]))
        q, k = kq_norm(q, k, P[p + "attn.q_gain"], P[p + "attn.k_gain"], c.norm_eps)
        if opts.record_kv is not None:
            opts.record_kv.append((k.data, v.data))
        k_pos = positions
        if opts.anchor_kv is not None:
            ak, av, amask = opts.anchor_kv[i]
            La = ak.shape[-2]
            k = T.concat([k, Tensor(np.broadcast_to(ak, (B,) + ak.shape[1:]).astype(k.dtype))], axis=2)
            v = T.concat([v, Tensor(np.broadcast_to(av, (B,) + av.shape[1:]).astype(v.dtype))], axis=2)
            k_pos = np.concatenate([positions, appended_positions(positions, La)])
            key_mask = np.concatenate(
                [key_mask, np.broadcast_to(amask, (B, La))], axis=1
            )
        q = apply_rope(q, positions, freqs)
        k = apply_rope(k, k_pos, freqs)
        scale = opts.prop_scale / math.sqrt(c.head_dim)
        logits = matmul(q, k.transpose(0, 1, 3, 2)) * scale
        if opts.logit_probe is not None:
            gq = np.abs(P[p + "attn.q_gain"].data).max()
            gk = np.abs(P[p + "attn.k_gain"].data).max()
            bound = opts.prop_scale * math.sqrt(c.head_dim) * float(gq * gk)
            peak = float(np.abs(np.where(key_mask[:, None, None, :], logits.data, 0)).max())
            opts.logit_probe(i, peak, bound)
        w = softmax_lastdim(logits, key_mask[:, None, None, :])
        out = matmul(w, v)

        tk = self._split_heads(matmul(text_tok, P[p + "cross.wk"]))
        tv = self._split_heads(matmul(text_tok, P[p + "cross.wv"]))
        tmask = None if opts.text_mask is None else opts.text_mask[:, None, :, :]
        probe = None
        if opts.probe is not None:
            probe = lambda weights: opts.probe(i, weights, opts.text_mask)  # noqa: E731
        out = gated_cross_attention(out, q, tk, tv, P[p + "cross.alpha"], tmask, probe)
        out = out.transpose(0, 2, 1, 3).reshape(B, L, D)
        return matmul(out, P[p + "attn.wo"]) + P[p + "attn.bo"]

    def _block(self, i, x, cond, text_tok, positions, key_mask, freqs, opts):
        P, c = self.params, self.config
        p = f"blocks.{i}."
        D = c.hidden
        mod = matmul(cond, P[p + "mod.w"]) + P[p + "mod.b"]
        B = mod.shape[0]
        mod = mod.reshape(B, 1, 6 * D)
        shift1, scale1, gate1 = mod[..., 0:D], mod[..., D : 2 * D], mod[..., 2 * D : 3 * D]
        shift2, scale2, gate2 = mod[..., 3 * D : 4 * D], mod[..., 4 * D : 5 * D], mod[..., 5 * D :]
        ones = self._ones
        h = modulate(rms_norm(x, ones, c.norm_eps), shift1, scale1)
        x = x + self._attention(i, h, text_tok, positions, key_mask, freqs, opts) * gate1
        h = modulate(rms_norm(x, ones, c.norm_eps), shift2, scale2)
        ff = matmul((matmul(h, P[p + "mlp.w1"]) + P[p + "mlp.b1"]).silu(), P[p + "mlp.w2"])
        return x + (ff + P[p + "mlp.b2"]) * gate2

    # --- forward ---------------------------------------------------------
    def forward(self, batch: SequenceBatch, t, text_ids, opts: ForwardOptions | None = None) -> Tensor:
        """Velocity for every sequence slot, ``[B, L, p*p*C]``.

        Only PATCH slots carry meaning; specials and PADs are ignored by the
        loss and by the samplers.
        """
        opts = opts or ForwardOptions()
        c, P = self.config, self.params
        B, L = batch.kinds.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        if np.any(~np.isfinite(t)):
            raise ValueError("timesteps must be finite")
        text_ids = np.asarray(text_ids, dtype=np.int64)
        if text_ids.ndim == 1:
            text_ids = np.broadcast_to(text_ids, (B, text_ids.shape[0]))
        if text_ids.shape[0] != B:
            raise ValueError(f"{text_ids.shape[0]} prompts for a batch of {B}")
        if batch.tokens.shape[-1] != c.patch_dim:
            raise ValueError(f"token width {batch.tokens.shape[-1]} != patch dim {c.patch_dim}")
        self._ones = Tensor(np.ones(c.hidden, dtype=self.dtype))

        x = self._embed_tokens(batch)
        text_tok, text_glob = self.toy_text_encode(text_ids)
        cond = (self.timestep_embedding(t) + text_glob).silu()
        positions = np.arange(L, dtype=np.int64) + int(opts.position_offset)
        freqs = build_freqs(c.head_dim, opts.rope_base or c.rope_base)
        key_mask = np.asarray(batch.mask, dtype=bool)
        for i in range(c.layers):
            x = self._block(i, x, cond, text_tok, positions, key_mask, freqs, opts)

        D = c.hidden
        mod = (matmul(cond, P["final.mod.w"]) + P["final.mod.b"]).reshape(B, 1, 2 * D)
        h = modulate(rms_norm(x, self._ones, c.norm_eps), mod[..., :D], mod[..., D:])
        return matmul(h, P["final.w"]) + P["final.b"]

    __call__ = forward

    def predict(self, patches: np.ndarray, layout: Layout, t, text_ids,
                opts: ForwardOptions | None = None) -> np.ndarray:
        """No-grad velocity at PATCH slots for ``[B, N, D]`` patch payloads."""
        batch = batch_from_patches(np.asarray(patches), layout)
        with T.no_grad():
            out = self.forward(batch, t, text_ids, opts).data
        return out[:, batch.kinds[0] == PATCH]


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``x * (1 + scale) + shift``; zero modulation leaves ``x`` unchanged."""
    return x * (scale + 1.0) + shift


def patch_outputs(out: Tensor | np.ndarray, batch: SequenceBatch) -> np.ndarray:
    """Rows of ``out`` at PATCH slots, concatenated over the batch."""
    arr = out.data if isinstance(out, Tensor) else out
    return arr[batch.kinds == PATCH]


def count_parameters(model: FlagDiT) -> int:
    return int(sum(p.data.size for p in model.params.values()))
