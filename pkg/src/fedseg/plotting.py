"""Figures written next to the JSON/CSV reports.

Uses the object-oriented Figure API with the Agg canvas so that rendering
works headless and from worker threads.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .metrics import bbox, binarize

_METADATA = {"Software": None}


def _save(fig, path):
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_METADATA)


def plot_round_log(records, path, baseline=None):
    """Per-node local loss and global parameter change per round."""
    fig = Figure(figsize=(9, 3.5))
    ax_loss, ax_diff = fig.subplots(1, 2)
    rounds = [r["round"] for r in records]
    nodes = sorted({n for r in records for n in r["node_losses"]}, key=int)
    for n in nodes:
        ax_loss.plot(rounds, [r["node_losses"].get(n, np.nan) for r in records],
                     marker="o", ms=3, label=f"node {n}")
    if baseline:
        ax_loss.plot([r["round"] for r in baseline],
                     [np.mean(list(r["node_losses"].values())) for r in baseline],
                     "k--", label="centralized")
    ax_loss.set_xlabel("round")
    ax_loss.set_ylabel("mean local BCE")
    ax_loss.legend(frameon=False, fontsize=8)
    ax_diff.semilogy(rounds, [max(r["global_diff_norm"], 1e-12) for r in records], marker="o", ms=3)
    ax_diff.set_xlabel("round")
    ax_diff.set_ylabel("||global_k - global_(k-1)||")
    fig.tight_layout()
    _save(fig, path)


def plot_eval(report, path):
    """Per-sample metric values for every domain, with the domain mean."""
    fig = Figure(figsize=(1.8 + 1.6 * len(report.domains), 3.5))
    ax = fig.subplots()
    for i, d in enumerate(report.domains):
        x = np.full(len(d.values), i) + np.linspace(-0.15, 0.15, len(d.values))
        ax.scatter(x, d.values, s=12, alpha=0.7)
        ax.hlines(d.mean, i - 0.3, i + 0.3, colors="k")
    ax.set_xticks(range(len(report.domains)))
    ax.set_xticklabels([d.name for d in report.domains])
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("dice" if report.task == "segmentation" else "overlap similarity")
    ax.set_title(f"{report.task}: pooled mean {report.pooled_mean:.3f}", fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def plot_predictions(images, masks, probs, path, task="segmentation", threshold=0.5, limit=4):
    """Image with ground-truth (green) and predicted (red) outlines or predicted box."""
    n = min(limit, len(images))
    fig = Figure(figsize=(2.4 * n, 2.6))
    axes = np.atleast_1d(fig.subplots(1, n))
    for ax, img, msk, p in zip(axes, images[:n], masks[:n], probs[:n]):
        ax.imshow(img[min(1, img.shape[0] - 1)], cmap="gray")
        ax.contour(msk[0], levels=[0.5], colors="g", linewidths=1)
        pred = binarize(p[0], threshold)
        if task == "localization":
            box = bbox(pred)
            if box is not None:
                y0, x0, y1, x1 = box
                ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0 + 1, y1 - y0 + 1,
                                       fill=False, ec="r", lw=1))
        elif pred.any():
            ax.contour(pred, levels=[0.5], colors="r", linewidths=1)
        ax.set_axis_off()
    fig.tight_layout()
    _save(fig, path)
