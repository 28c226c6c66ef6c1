"""PNG figures rendered next to the CSV outputs of a run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_phase(path, states, reference=None, baseline=None, circles=(), title=""):
    """First two coordinates of the rollout, with optional data and plain rollout."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        if reference is not None:
            ax.plot(reference[:, 0], reference[:, 1], color="0.6", lw=1.0, ls="--", label="data")
        if baseline is not None:
            ax.plot(baseline[:, 0], baseline[:, 1], color="tab:red", lw=1.0, label="plain")
        ax.plot(states[:, 0], states[:, 1], color="tab:blue", lw=1.2, label="rollout")
        for c, r in circles:
            ax.add_patch(plt.Circle(c, r, color="tab:orange", alpha=0.5, lw=0))
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("$x_1$")
        ax.set_ylabel("$x_2$")
        ax.legend(frameon=False, loc="best")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_h(path, t, h, labels=None, baseline=None, title=""):
    """Each spec value against time; the zero line is the safety boundary."""
    h = np.atleast_2d(h.T).T
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for j in range(h.shape[1]):
            name = labels[j] if labels else f"h{j}"
            ax.plot(t, h[:, j], lw=1.0, label=name)
        if baseline is not None:
            ax.plot(baseline[0], np.min(baseline[1], axis=1), color="tab:red", lw=0.8, ls=":",
                    label="plain (min)")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xlabel("t")
        ax.set_ylabel("h")
        if h.shape[1] <= 6 or baseline is not None:
            ax.legend(frameon=False, loc="best")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_loss(path, curve):
    epochs = [r.epoch for r in curve]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.semilogy(epochs, [r.train_loss for r in curve], lw=0.8, label="train")
        val = [(r.epoch, r.val_mse) for r in curve if np.isfinite(r.val_mse)]
        if val:
            ax.semilogy(*zip(*val), "o-", ms=3, lw=1.0, label="rollout MSE")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)
