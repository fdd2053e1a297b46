"""Matplotlib report figures written next to the CSV outputs.

Greyscale maps follow one convention throughout: darker means larger.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp or version in the file, so reruns are byte-identical
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.facecolor": "white",
    "savefig.bbox": "tight",
}


def _grid_axes(ax, n_rows, n_cols, row_label="layer", col_label="head"):
    ax.set_xticks(range(n_cols))
    ax.set_yticks(range(n_rows))
    ax.set_xlabel(col_label)
    ax.set_ylabel(row_label)


def plot_head_grid(scores, path, title="", vmin=None, vmax=None, cmap="Greys", annotate=True):
    """Heatmap of a layers x heads array."""
    scores = np.asarray(scores, dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * scores.shape[1], 0.8 + 0.6 * scores.shape[0]))
        im = ax.imshow(scores, cmap=cmap, vmin=vmin, vmax=vmax, aspect="auto")
        _grid_axes(ax, *scores.shape)
        if annotate:
            mid = np.nanmean(scores) if vmin is None else 0.5 * (vmin + vmax)
            for (l, h), s in np.ndenumerate(scores):
                ax.text(h, l, f"{s:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if s > mid else "black")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.05)
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)


def plot_pattern_distribution(fractions: dict, path, title="Attention pattern classes"):
    names = [getattr(k, "value", str(k)) for k in fractions]
    values = [100.0 * v for v in fractions.values()]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(names, values, color="0.35")
        ax.set_ylabel("% of maps")
        ax.set_ylim(0, 100)
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=20)
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)


def plot_ablation(report, path):
    """Head sweeps as a delta heatmap; layer sweeps as a bar chart, with the baseline marked."""
    with plt.rc_context(RC):
        if report.kind == "heads":
            d = report.deltas
            lim = max(float(np.abs(d).max()), 1e-12)
            plot_head_grid(d, path, f"score - baseline ({report.baseline_score:.3f})", -lim, lim, cmap="RdBu")
            return
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(range(len(report.grid)), report.grid, color="0.35", label="layer disabled")
        ax.axhline(report.baseline_score, color="tab:orange", label="baseline")
        ax.set_xticks(range(len(report.grid)))
        ax.set_xlabel("disabled layer")
        ax.set_ylabel(report.metric)
        ax.legend(loc="lower right")
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)


def plot_cls_profile(profile, path, title="Final-layer [CLS] attention"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.5 + 0.6 * len(profile.categories), 1 + 0.5 * profile.shares.shape[0]))
        im = ax.imshow(profile.shares, cmap="Greys", vmin=0, vmax=1, aspect="auto")
        ax.set_xticks(range(len(profile.categories)))
        ax.set_xticklabels(profile.categories, rotation=30, ha="right")
        ax.set_yticks(range(profile.shares.shape[0]))
        ax.set_ylabel("head")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.05)
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
