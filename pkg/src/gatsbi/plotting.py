"""Static figures: forecast scenes with attention, mixture density, error spread."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "serif",
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.linewidth": 0.8,
    "figure.dpi": 110,
}

PALETTE = ["#0C5DA5", "#00A08A", "#F2AD00", "#F98400", "#5BBCD6", "#B40F20"]
EGO_COLOR = "#B40F20"


def finalize_axes(ax):
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)
    ax.grid(alpha=0.25, linewidth=0.5, linestyle="--")
    ax.tick_params(direction="out", length=3, width=0.7)


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_scene(tensors, index: int, prediction=None, attention=None, ax=None, title=None):
    """History, ground truth (dashed) and forecast of one window in relative lane coordinates.

    Neighbours are drawn at the reference frame with a circle whose area
    grows with the ego's attention to them.
    """
    own = ax is None
    with plt.rc_context(STYLE):
        if own:
            fig, ax = plt.subplots(figsize=(7, 3.2))
        hist = tensors.ego_hist[index]
        fut = tensors.ego_fut[index]
        ax.plot(hist[:, 0], hist[:, 1], color=EGO_COLOR, lw=1.4, label="ego history")
        ax.plot(np.r_[hist[-1:, 0], fut[:, 0]], np.r_[hist[-1:, 1], fut[:, 1]], color=EGO_COLOR,
                lw=1.2, ls="--", label="ground truth")
        if prediction is not None:
            pred = np.asarray(prediction)
            ax.plot(np.r_[hist[-1:, 0], pred[:, 0]], np.r_[hist[-1:, 1], pred[:, 1]], color=PALETTE[0],
                    lw=1.4, label="forecast")
        ax.scatter([0.0], [0.0], s=30, color=EGO_COLOR, zorder=3)
        for j in range(tensors.nb_hist.shape[1]):
            if not tensors.nb_valid[index, j]:
                continue
            m = tensors.nb_mask[index, j]
            nb = tensors.nb_hist[index, j][m]
            color = PALETTE[(j + 1) % len(PALETTE)]
            ax.plot(nb[:, 0], nb[:, 1], color=color, lw=0.9, alpha=0.8)
            label = tensors.neighbor_ids[index][j] if j < len(tensors.neighbor_ids[index]) else str(j)
            weight = None if attention is None else float(np.asarray(attention)[0, j + 1])
            size = 20 if weight is None else 20 + 600 * weight
            ax.scatter(nb[-1:, 0], nb[-1:, 1], s=size, facecolors="none", edgecolors=color, lw=1.0, zorder=3)
            text = label if weight is None else f"{label} ({weight:.2f})"
            ax.annotate(text, nb[-1], xytext=(3, 3), textcoords="offset points", fontsize=7, color=color)
        ax.set_xlabel("track-aligned distance s [m]")
        ax.set_ylabel("radius offset d [m]")
        ax.set_title(title or tensors.window_ids[index])
        ax.legend(loc="best", frameon=False)
        finalize_axes(ax)
    return ax.figure


def mixture_density(mixture, grid: int = 200, pad: float = 1.0):
    """Mixture density of one window summed over prediction steps on a regular grid.

    ``mixture`` is a :class:`~gatsbi.output.MixtureForecast` with (T, K) fields.
    """
    arr = {k: np.asarray(v.detach().cpu().double()) for k, v in mixture.__dict__.items() if v is not None}
    mx, my, sx, sy, rho, pi = (arr[k] for k in ("mu_x", "mu_y", "sigma_x", "sigma_y", "rho", "pi"))
    reach_x = 2 * sx.max() + pad
    reach_y = 2 * sy.max() + pad
    xs = np.linspace(mx.min() - reach_x, mx.max() + reach_x, grid)
    ys = np.linspace(my.min() - reach_y, my.max() + reach_y, grid)
    X, Y = np.meshgrid(xs, ys)
    dens = np.zeros_like(X)
    for t in range(mx.shape[0]):
        for k in range(mx.shape[1]):
            zx = (X - mx[t, k]) / sx[t, k]
            zy = (Y - my[t, k]) / sy[t, k]
            r = rho[t, k]
            q = (zx**2 + zy**2 - 2 * r * zx * zy) / (1 - r**2)
            dens += pi[t, k] * np.exp(-0.5 * q) / (2 * np.pi * sx[t, k] * sy[t, k] * np.sqrt(1 - r**2))
    return xs, ys, dens


def plot_uncertainty(tensors, index: int, mixture, ax=None, title=None):
    """Forecast density of window ``index`` over the whole horizon, with component means.

    ``mixture`` holds that window's forecast only, (T, K) per field.
    """
    own = ax is None
    with plt.rc_context(STYLE):
        if own:
            fig, ax = plt.subplots(figsize=(7, 3.2))
        xs, ys, dens = mixture_density(mixture)
        ax.pcolormesh(xs, ys, np.log1p(dens), cmap="magma_r", shading="auto")
        hist, fut = tensors.ego_hist[index], tensors.ego_fut[index]
        ax.plot(hist[:, 0], hist[:, 1], color=EGO_COLOR, lw=1.2, label="history")
        ax.plot(fut[:, 0], fut[:, 1], color="k", lw=1.0, ls="--", label="ground truth")
        means = mixture.means.detach().cpu().numpy()
        pi_last = mixture.pi[-1].detach().cpu().numpy()
        for k, mean in enumerate(means):
            ax.plot(mean[:, 0], mean[:, 1], color=PALETTE[k % len(PALETTE)], lw=1.0,
                    label=f"component {k + 1} (pi={pi_last[k]:.2f})")
        ax.set_xlabel("track-aligned distance s [m]")
        ax.set_ylabel("radius offset d [m]")
        ax.set_title(title or f"forecast density {tensors.window_ids[index]}")
        ax.legend(loc="best", frameon=False)
        finalize_axes(ax)
    return ax.figure


def plot_error_distribution(ade, fde, labels=None, ax=None, title=None):
    """Per-window ADE against FDE, one colour per model."""
    own = ax is None
    ade = [np.asarray(a) for a in (ade if isinstance(ade, (list, tuple)) else [ade])]
    fde = [np.asarray(f) for f in (fde if isinstance(fde, (list, tuple)) else [fde])]
    labels = labels or [f"model {i + 1}" for i in range(len(ade))]
    with plt.rc_context(STYLE):
        if own:
            fig, ax = plt.subplots(figsize=(4.5, 4))
        for i, (a, f, lab) in enumerate(zip(ade, fde, labels)):
            ax.scatter(a, f, s=8, alpha=0.6, color=PALETTE[i % len(PALETTE)],
                       label=f"{lab} (ADE {a.mean():.2f})")
        ax.set_xlabel("ADE [m]")
        ax.set_ylabel("FDE [m]")
        ax.set_title(title or "per-window error")
        ax.legend(loc="best", frameon=False)
        finalize_axes(ax)
    return ax.figure


def plot_training_curve(log, ax=None, title=None):
    own = ax is None
    epochs = [rec["epoch"] for rec in log]
    with plt.rc_context(STYLE):
        if own:
            fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(epochs, [rec["mean_val_ade"] for rec in log], color=PALETTE[0], label="validation ADE")
        ax.set_xlabel("epoch")
        ax.set_ylabel("ADE [m]")
        twin = ax.twinx()
        folds = sorted(log[0]["train_loss"])
        twin.plot(epochs, [np.mean([rec["train_loss"][f] for f in folds]) for rec in log],
                  color=PALETTE[3], lw=0.9, label="training loss")
        twin.set_ylabel("training loss")
        ax.set_title(title or "training")
        handles = ax.get_legend_handles_labels()[0] + twin.get_legend_handles_labels()[0]
        ax.legend(handles, [h.get_label() for h in handles], loc="upper right", frameon=False)
        finalize_axes(ax)
    return ax.figure
