"""Figures for experiment reports (non-interactive Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(path, gammas, errors, title="classifier combination"):
    """Error rate against the combination factor (0: partner only, 1: PBN only)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(gammas, 100 * np.asarray(errors), "o-", ms=3, color="C0")
        i = int(np.argmin(errors))
        ax.plot(gammas[i], 100 * errors[i], "s", color="C3", ms=6, label=f"best {100 * errors[i]:.1f}%")
        ax.set_xlabel("combination factor")
        ax.set_ylabel("error (%)")
        ax.set_xlim(-0.02, 1.02)
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_confusion(path, confusion, title="confusion"):
    conf = np.asarray(confusion)
    k = conf.shape[0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        ax.imshow(conf, cmap="Blues")
        for i in range(k):
            for j in range(k):
                if conf[i, j]:
                    ax.text(j, i, str(conf[i, j]), ha="center", va="center", fontsize=7,
                            color="white" if conf[i, j] > conf.max() / 2 else "black")
        ax.set_xticks(range(k))
        ax.set_yticks(range(k))
        ax.set_xlabel("decided class")
        ax.set_ylabel("true class")
        ax.set_title(title)
        return _save(fig, path)


def plot_curves(path, curves, title="training objective"):
    """One panel per model family, one line per trained model.

    ``curves`` maps a label to a list of per-epoch objective curves.
    """
    n = max(1, len(curves))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.4), squeeze=False)
        for k, (ax, (label, group)) in enumerate(zip(axes[0], curves.items())):
            for c in group:
                ax.plot(np.arange(1, len(c) + 1), c, color=f"C{k}", lw=0.9, alpha=0.8)
            ax.set_xlabel("epoch")
            ax.set_title(label)
        axes[0, 0].set_ylabel("objective")
        fig.suptitle(title, fontsize=9)
        return _save(fig, path)


def plot_reconstructions(path, originals, rows, labels=None):
    """Spectrogram grid: originals on top, one row per reconstructing model.

    ``originals`` is (n, frames, bins); ``rows`` maps a row label to an
    array of the same shape.
    """
    originals = np.asarray(originals)
    n = originals.shape[0]
    grid = [("original", originals)] + list(rows.items())
    lo, hi = np.percentile(originals, [2, 98])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(grid), n, figsize=(1.1 * n, 1.1 * len(grid)), squeeze=False)
        for r, (name, imgs) in enumerate(grid):
            for c in range(n):
                ax = axes[r, c]
                ax.imshow(np.asarray(imgs)[c].T, origin="lower", aspect="auto", cmap="magma",
                          vmin=lo, vmax=hi)
                ax.set_xticks([])
                ax.set_yticks([])
                if c == 0:
                    ax.set_ylabel(name, fontsize=7)
                if r == 0 and labels is not None:
                    ax.set_title(str(labels[c]), fontsize=7)
        return _save(fig, path)
