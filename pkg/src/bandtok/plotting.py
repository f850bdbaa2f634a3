"""Report figures.  Everything renders to files through the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.2,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "image.interpolation": "nearest",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def nmi_heatmap(ax, matrix, title=""):
    im = ax.imshow(matrix.values, vmin=0.0, vmax=1.0, cmap="magma")
    n = len(matrix.labels)
    step = max(1, n // 8)
    ticks = list(range(0, n, step))
    ax.set_xticks(ticks, [matrix.labels[i] for i in ticks], rotation=90)
    ax.set_yticks(ticks, [matrix.labels[i] for i in ticks])
    ax.set_title(title)
    return im


def plot_nmi(matrix, path, title="pairwise NMI"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = nmi_heatmap(ax, matrix, title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_ppl(profile, path, title=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        x = np.arange(len(profile.raw_ppl))
        ax.plot(x, profile.raw_ppl, "o-", color="C0")
        ax.set_xlabel(profile.axis)
        ax.set_ylabel("perplexity")
        ax.set_title(title or f"per-{profile.axis} perplexity")
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_geometry(report, path):
    """Two NMI heatmaps plus normalised PPL profiles, band vs residual."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.0))
        nmi_heatmap(axes[0], report.band_nmi, "band tokens: NMI")
        im = nmi_heatmap(axes[1], report.residual_nmi, "residual tokens: NMI")
        fig.colorbar(im, ax=axes[1], fraction=0.046, pad=0.04)
        ax = axes[2]
        for prof, label in ((report.band_ppl, "band"), (report.residual_ppl, "residual layer")):
            ax.plot(np.arange(len(prof.normalized)), prof.normalized, "o-", label=label)
        ax.set_xlabel("axis index")
        ax.set_ylabel("normalised perplexity")
        ax.legend()
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_losses(records, path, keys=("total",), title="training"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        steps = [r["step"] for r in records]
        for k in keys:
            vals = [r[k] for r in records if k in r]
            if vals:
                ax.plot(steps[:len(vals)], vals, label=k)
        ax.set_xlabel("step")
        ax.set_title(title)
        ax.legend()
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_mel(values, path, title="log-Mel"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        im = ax.imshow(np.asarray(values).T, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xlabel("frame")
        ax.set_ylabel("Mel bin")
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
        return _save(fig, path)
