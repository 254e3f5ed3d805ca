"""PNG figures written next to the CSV outputs."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def plot_loss_curve(log: Sequence[dict], path, title: str = "training loss") -> None:
    """Window-mean loss (log scale) and gradient norm against step."""
    steps = [r["step"] for r in log]
    fig, (ax_l, ax_g) = plt.subplots(1, 2, figsize=(9, 3.2))
    if steps:
        ax_l.plot(steps, [r["loss"] for r in log], color="C0")
        ax_l.set_yscale("log")
        ax_g.plot(steps, [r["grad_norm"] for r in log], color="C1")
    ax_l.set(xlabel="step", ylabel="loss", title=title)
    ax_g.set(xlabel="step", ylabel="grad norm (pre-clip)")
    for ax in (ax_l, ax_g):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def deactivated_fraction(gates: np.ndarray, thresholds) -> np.ndarray:
    g = np.abs(np.asarray(gates, dtype=np.float64)).ravel()
    return np.array([np.mean(g < tau) for tau in np.atleast_1d(thresholds)])


def plot_gates(gates: np.ndarray, path, threshold: float | None = None) -> None:
    """Heatmap of ``|tanh(alpha)|`` per layer and head, and the deactivated
    fraction as a function of threshold."""
    g = np.abs(np.asarray(gates, dtype=np.float64))
    fig, (ax_h, ax_c) = plt.subplots(1, 2, figsize=(9, 3.4))
    im = ax_h.imshow(g, aspect="auto", cmap="viridis", vmin=0.0,
                     vmax=max(float(g.max()), 1e-12))
    ax_h.set(xlabel="head", ylabel="layer", title="|tanh(alpha)|")
    fig.colorbar(im, ax=ax_h)
    top = max(float(g.max()) * 1.1, 1e-3)
    taus = np.linspace(0.0, top, 200)
    ax_c.plot(taus, deactivated_fraction(g, taus), color="C2")
    if threshold is not None:
        ax_c.axvline(threshold, color="k", ls="--", lw=0.8)
    ax_c.set(xlabel="threshold", ylabel="fraction deactivated", ylim=(-0.02, 1.02))
    ax_c.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
