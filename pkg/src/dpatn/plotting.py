"""Report figures. Everything renders with the Agg backend straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_losses(reports, path, title="training loss"):
    """One curve per fit, iterations concatenated along the x axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        start = 0
        for i, rep in enumerate(reports):
            losses = np.asarray(rep.losses)
            x = start + np.arange(losses.size)
            ax.semilogy(x, np.maximum(losses, 1e-300), label=f"fit {i}")
            start += max(losses.size - 1, 1)
        ax.set_xlabel("L-BFGS iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        if len(reports) > 1:
            ax.legend(fontsize=7)
        return _save(fig, path)


def plot_certificate(report, path):
    """Successive differences and their penalty-scaled versions for a separation run."""
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3.2))
        k = np.arange(report.iterations)
        scaled = report.scaled()
        for j, name in enumerate(report.COLUMNS):
            a0.semilogy(k, np.maximum(report.diffs[:, j], 1e-16), label=name)
            a1.semilogy(k, np.maximum(scaled[:, j], 1e-16), label=name)
        a0.set_title("RMS successive difference")
        a1.set_title(r"difference $\times\ \mu^k$")
        for ax in (a0, a1):
            ax.set_xlabel("iteration k")
            ax.legend(fontsize=7)
        return _save(fig, path)


def plot_maps(images, titles, path, cmap="gray"):
    """Row of images or scalar maps with shared layout."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(2.6 * len(images), 2.8), squeeze=False)
        for ax, img, title in zip(axes[0], images, titles):
            img = np.clip(np.asarray(img), 0.0, 1.0)
            ax.imshow(img, cmap=None if img.ndim == 3 else cmap, vmin=0, vmax=1)
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)


def plot_psnr_bars(table, path, title="held-out PSNR"):
    """Bar chart of mean PSNR per method with per-image spread; ``table`` maps name -> values."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        names = list(table)
        means = [float(np.mean(table[n])) for n in names]
        spread = [float(np.std(table[n])) for n in names]
        ax.bar(names, means, yerr=spread, capsize=3, color="0.6", edgecolor="0.2")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(title)
        lo = min(m - s for m, s in zip(means, spread))
        ax.set_ylim(max(0.0, lo - 2.0), None)
        return _save(fig, path)
