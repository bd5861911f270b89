"""SVG figures for sweep results and trajectory projections."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable ids and no timestamp so reruns give identical files
matplotlib.rcParams["svg.hashsalt"] = "dfm"
matplotlib.rcParams["svg.fonttype"] = "none"

COLORS = {"dfm": "tab:orange", "ff": "tab:cyan", "dfm-masked": "tab:purple"}


def _color(model: str):
    return COLORS.get(model)


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_metric_vs_sigma(curves: dict, path, metric: str = "top1") -> None:
    """``curves[model] = (sigmas, means, stds)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for model, (xs, mean, std) in sorted(curves.items()):
        xs, mean, std = map(np.asarray, (xs, mean, std))
        ax.errorbar(xs, mean, yerr=std, marker="o", capsize=3, label=model, color=_color(model))
    ax.set_xlabel("noise sigma")
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_fewshot(curves: dict, fits: dict, path, metric: str = "top1", chance: float | None = None) -> None:
    """Log-log accuracy vs examples per class with fitted power laws."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for model, (xs, mean, std) in sorted(curves.items()):
        xs, mean, std = map(np.asarray, (xs, mean, std))
        c = _color(model)
        ax.errorbar(xs, mean, yerr=std, marker="o", capsize=3, label=model, color=c)
        fit = fits.get(model)
        if fit is not None:
            grid = np.geomspace(xs.min(), xs.max(), 50)
            ax.plot(grid, np.exp(fit.intercept) * grid ** fit.slope, ls=":", color=c)
    if chance is not None:
        ax.axhline(chance, color="tab:red", ls=":", lw=1)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("examples per class D")
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_pca_paths(paths: np.ndarray, labels: np.ndarray, losses: np.ndarray, path) -> None:
    """One line per instance, markers darken with loss."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    cmap = plt.get_cmap("tab10")
    lmax = float(np.nanmax(losses)) if np.isfinite(losses).any() else 1.0
    for i, p in enumerate(paths):
        c = cmap(int(labels[i]) % 10)
        ax.plot(p[:, 0], p[:, 1], color=c, lw=0.8, alpha=0.7)
        shade = np.clip(losses[i] / (lmax or 1.0), 0, 1)
        ax.scatter(p[:, 0], p[:, 1], c=shade, cmap="Greys", vmin=0, vmax=1, s=10,
                   edgecolors=[c] * len(p), linewidths=0.5)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    _save(fig, path)
