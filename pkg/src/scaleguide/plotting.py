"""Figures written next to the CSV reports."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so repeated runs write identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "scaleguide"
SVG_METADATA = {"Date": None, "Creator": None}
PNG_METADATA = {"Software": None}


def _save(fig, path_stem, formats):
    written = []
    for fmt in formats:
        path = f"{path_stem}.{fmt}"
        meta = SVG_METADATA if fmt == "svg" else PNG_METADATA if fmt == "png" else None
        fig.savefig(path, format=fmt, metadata=meta, bbox_inches="tight")
        written.append(path)
    plt.close(fig)
    return written


def plot_recall_curves(report, out_dir, formats=("svg",)):
    """One recall-vs-IoU figure per proposal budget K, one line per method."""
    written = []
    for i, k in enumerate(report.ks):
        fig, ax = plt.subplots(figsize=(5, 4))
        for method in report.methods:
            ax.plot(report.thresholds, report.micro[method][i], marker="o", ms=3,
                    label=f"{method} (AR={report.ar(method, k):.3f})")
        ax.set_xlabel("IoU threshold")
        ax.set_ylabel("recall")
        ax.set_title(f"Recall vs IoU, {k} proposals")
        ax.set_xlim(0.5, 0.95)
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        written += _save(fig, os.path.join(out_dir, f"recall_iou_K{k}"), formats)
    return written


def plot_sparsity(nonzero_counts, out_path_stem, formats=("svg",), label=None):
    """Histogram of the number of occupied size bins per image."""
    counts = np.bincount(np.asarray(nonzero_counts, dtype=int), minlength=11)[:11]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(np.arange(11), counts / max(1, counts.sum()), color="0.35")
    ax.set_xticks(range(11))
    ax.set_xlabel("non-zero size bins per image")
    ax.set_ylabel("fraction of images")
    if label:
        ax.set_title(label)
    return _save(fig, out_path_stem, formats)


def plot_loss(losses, out_path_stem, formats=("svg",)):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean KL loss (nats)")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    return _save(fig, out_path_stem, formats)
