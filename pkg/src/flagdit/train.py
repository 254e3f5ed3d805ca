"""Flow-matching training loop (Adam, global-norm clipping, CFG dropout)."""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .codec import Layout, batch_from_patches, patchify
from .data import Dataset
from .flow import TIME_SAMPLERS, cfm_loss, interpolate
from .model import UNCOND_ID, FlagDiT, ForwardOptions

LOG_FIELDS = ("step", "loss", "grad_norm", "lr", "wallclock_ms")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    cfg_dropout: float = 0.1
    time_sampler: str = "lognorm"
    schedule: str = "linear"
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.time_sampler not in TIME_SAMPLERS:
            raise ValueError(f"time_sampler must be one of {sorted(TIME_SAMPLERS)}")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1]")


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * upd).astype(p.dtype)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grads(params, max_norm: float, norm: float) -> None:
    if max_norm and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * f).astype(p.grad.dtype)


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    t: np.ndarray
    max_logit: float | None = None


def make_training_batch(grids: np.ndarray, labels, tcfg: TrainConfig, rng, patch: int,
                        dtype=np.float32):
    """Draw times, noise and CFG dropout; returns everything ``train_step`` needs.

    Draw order is fixed (times, noise, dropout) so runs are reproducible.
    """
    grids = np.asarray(grids, dtype=dtype)
    B, H, W, T, C = grids.shape
    layout = Layout(H, W, T, patch)
    t = TIME_SAMPLERS[tcfg.time_sampler](rng, B)
    eps = rng.standard_normal(grids.shape).astype(dtype)
    drop = rng.random(B) < tcfg.cfg_dropout
    prompts = np.where(drop, UNCOND_ID, np.asarray(labels)).reshape(B, 1)
    x_t = interpolate(grids, eps, t, tcfg.schedule)

    def tokens(g):
        return patchify(g, patch).reshape(B, layout.num_patches, -1)

    batch = batch_from_patches(tokens(x_t), layout)
    x_tok = batch_from_patches(tokens(grids), layout).tokens
    eps_tok = batch_from_patches(tokens(eps), layout).tokens
    return batch, x_tok, eps_tok, t, prompts


def loss_for(model: FlagDiT, batch, x_tok, eps_tok, t, prompts, schedule="linear",
             opts: ForwardOptions | None = None):
    v = model.forward(batch, t, prompts, opts)
    return cfm_loss(v, x_tok, eps_tok, t, schedule, batch.patch_mask)


def train_step(model: FlagDiT, optimizer: Adam, grids, labels, tcfg: TrainConfig,
               rng: np.random.Generator, step: int = 0, monitor_logits: bool = False) -> StepResult:
    batch, x_tok, eps_tok, t, prompts = make_training_batch(
        grids, labels, tcfg, rng, model.config.patch_size, model.dtype)
    opts = None
    peaks: list[tuple[float, float]] = []
    if monitor_logits:
        opts = ForwardOptions(logit_probe=lambda layer, peak, bound: peaks.append((peak, bound)))
    model.zero_grad()
    loss = loss_for(model, batch, x_tok, eps_tok, t, prompts, tcfg.schedule, opts)
    loss.backward()
    norm = global_grad_norm(model.parameters())
    if not (math.isfinite(loss.item()) and math.isfinite(norm)):
        per_param = {
            k: float(np.sqrt(np.sum(np.square(p.grad, dtype=np.float64))))
            for k, p in model.params.items() if p.grad is not None
        }
        worst = sorted(per_param.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -np.inf)
        raise NumericalError(
            f"non-finite loss/gradient at step {step}: loss={loss.item()}, grad_norm={norm}, "
            f"t={np.round(t, 4).tolist()}, largest grad norms={worst[:5]}"
        )
    max_logit = None
    if monitor_logits:
        for peak, bound in peaks:
            if peak > bound * (1 + 1e-4):
                raise NumericalError(f"attention logit {peak} exceeds KQ-Norm bound {bound}")
        max_logit = max(p for p, _ in peaks)
    clip_grads(model.parameters(), tcfg.grad_clip, norm)
    optimizer.step()
    return StepResult(loss.item(), norm, t, max_logit)


@dataclass
class Stage:
    dataset: Dataset
    steps: int


@dataclass
class TrainResult:
    model: FlagDiT
    log: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def weight_hash(model: FlagDiT) -> str:
    h = hashlib.sha256()
    for k, p in model.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def train_loop(model: FlagDiT, dataset: Dataset | None, tcfg: TrainConfig,
               callbacks: Sequence[Callable[[dict], None]] = (),
               stages: Sequence[Stage] | None = None,
               monitor_logits: bool = False) -> TrainResult:
    """Run ``tcfg.steps`` steps on ``dataset``, or each of ``stages`` in turn.

    Every ``log_every`` steps a record with the window-mean loss is appended
    to the log and passed to each callback; stage boundaries emit
    ``{"event": "stage_start", ...}``.
    """
    if stages is None:
        if dataset is None:
            raise ValueError("train_loop needs a dataset or a list of stages")
        stages = [Stage(dataset, tcfg.steps)]
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(model.parameters(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps,
               tcfg.weight_decay)
    result = TrainResult(model)
    start = time.perf_counter()
    step = 0
    window: list[tuple[float, float]] = []
    for si, stage in enumerate(stages):
        H, W, T, C = stage.dataset.geometry
        for cb in callbacks:
            cb({"event": "stage_start", "stage": si, "step": step, "geometry": (H, W, T, C),
                "weights": weight_hash(model)})
        for _ in range(stage.steps):
            grids, labels = stage.dataset.sample(rng, tcfg.batch_size)
            res = train_step(model, opt, grids, labels, tcfg, rng, step, monitor_logits)
            result.losses.append(res.loss)
            window.append((res.loss, res.grad_norm))
            step += 1
            if step % tcfg.log_every == 0:
                rec = {
                    "event": "log",
                    "step": step,
                    "loss": float(np.mean([w[0] for w in window])),
                    "grad_norm": float(np.mean([w[1] for w in window])),
                    "lr": tcfg.lr,
                    "wallclock_ms": int(round(1000 * (time.perf_counter() - start))),
                }
                window.clear()
                result.log.append(rec)
                for cb in callbacks:
                    cb(rec)
        if stage.steps:
            model.config.train_height, model.config.train_width = H, W
            model.config.train_frames = T
    return result


def write_loss_csv(path, log: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for rec in log:
            w.writerow([rec["step"], repr(float(rec["loss"])), repr(float(rec["grad_norm"])),
                        repr(float(rec["lr"])), rec["wallclock_ms"]])
