"""Matplotlib figures written next to the CSV reports (headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_training_curves(runs: dict, path, column: str = "psnr_train", window: int = 50) -> None:
    """One line per run: moving average of ``column`` against iteration, plus splat counts."""
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for label, rows in runs.items():
        it = np.array([r["iter"] for r in rows], dtype=float)
        y = np.array([r[column] for r in rows], dtype=float)
        if len(y) >= window:
            y = np.convolve(y, np.ones(window) / window, mode="valid")
            it = it[window - 1:]
        ax.plot(it, y, label=label)
        ax2.plot([r["iter"] for r in rows], [r["n_gaussians"] for r in rows], label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"{column} (moving avg {window})")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("splats")
    ax.legend()
    _save(fig, path)


def plot_probe_scatter(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(report.importance, report.neg_delta_loss, s=8, alpha=0.6)
    ax.axhline(0.0, color="k", lw=0.5)
    rho = "n/a" if report.spearman is None else f"{report.spearman:.3f}"
    ax.set_title(f"Spearman = {rho}")
    ax.set_xlabel("importance I(i)")
    ax.set_ylabel("measured -dL")
    _save(fig, path)


def plot_ablation(rows, path) -> None:
    """Bar chart of mean test PSNR per variant with per-seed points."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = plt.subplots(figsize=(1.4 * len(variants) + 2, 4))
    for k, v in enumerate(variants):
        vals = [r["psnr"] for r in rows if r["variant"] == v]
        ax.bar(k, np.mean(vals), color="C0", alpha=0.6)
        ax.scatter([k] * len(vals), vals, color="k", s=10)
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants, rotation=20)
    ax.set_ylabel("test PSNR (dB)")
    _save(fig, path)


def plot_importance(s_map, path) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(s_map, cmap="magma", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax)
    ax.set_axis_off()
    _save(fig, path)
