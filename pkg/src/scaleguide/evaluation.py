"""Recall-based proposal evaluation and scale-sparsity statistics."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import IoFailure

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
K_VALUES = (10, 100, 1000)
CSV_FIELDS = ("method", "K", "iou_threshold", "recall", "n_gt")


def iou(a, b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax1, ay1 = a[0] + a[2], a[1] + a[3]
    bx1, by1 = b[0] + b[2], b[1] + b[3]
    iw = min(ax1, bx1) - max(a[0], b[0])
    ih = min(ay1, by1) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def iou_matrix(proposals, gts) -> np.ndarray:
    """(n_proposals, n_gt) IoU matrix."""
    if len(proposals) == 0 or len(gts) == 0:
        return np.zeros((len(proposals), len(gts)))
    p = np.array([_box(x) for x in proposals], dtype=float)
    g = np.array([_box(x) for x in gts], dtype=float)
    px0, py0, px1, py1 = p[:, 0:1], p[:, 1:2], p[:, 0:1] + p[:, 2:3], p[:, 1:2] + p[:, 3:4]
    gx0, gy0, gx1, gy1 = g[:, 0], g[:, 1], g[:, 0] + g[:, 2], g[:, 1] + g[:, 3]
    iw = np.clip(np.minimum(px1, gx1) - np.maximum(px0, gx0), 0, None)
    ih = np.clip(np.minimum(py1, gy1) - np.maximum(py0, gy0), 0, None)
    inter = iw * ih
    union = (p[:, 2:3] * p[:, 3:4]) + (g[:, 2] * g[:, 3]) - inter
    return inter / union


def _box(x):
    return tuple(x.bbox) if hasattr(x, "bbox") else tuple(x)


def greedy_matches(ious: np.ndarray, K: int, threshold: float) -> int:
    """Number of ground truths matched by score-ordered greedy one-to-one matching.

    Rows of ``ious`` must already be in descending score order.  Each of the
    first ``K`` proposals takes the unmatched ground truth it overlaps most,
    provided that overlap reaches ``threshold``.
    """
    n_p, n_g = ious.shape
    if n_g == 0 or n_p == 0:
        return 0
    free = np.ones(n_g, dtype=bool)
    matched = 0
    for row in ious[:K]:
        if not free.any():
            break
        cand = np.where(free, row, -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= threshold:
            free[j] = False
            matched += 1
    return matched


def match_and_recall(gts, proposals, K: int, threshold: float):
    """Recall of the top-``K`` proposals at one IoU threshold.

    Returns 1.0 for an image without ground truth; callers exclude such
    images from aggregates (see :func:`evaluate`).
    """
    if len(gts) == 0:
        return 1.0
    return greedy_matches(iou_matrix(proposals, gts), K, threshold) / len(gts)


def recall_curve(gts, proposals, K: int, thresholds=IOU_THRESHOLDS) -> np.ndarray:
    if len(gts) == 0:
        return np.ones(len(thresholds))
    ious = iou_matrix(proposals, gts)
    return np.array([greedy_matches(ious, K, t) for t in thresholds]) / len(gts)


def average_recall(gts, proposals, K: int) -> float:
    """Mean recall over IoU thresholds 0.50, 0.55, ..., 0.95."""
    return float(np.mean(recall_curve(gts, proposals, K)))


@dataclass
class EvalReport:
    """Recall matrices keyed by method; each matrix is indexed (K, threshold)."""

    ks: tuple = K_VALUES
    thresholds: tuple = IOU_THRESHOLDS
    micro: dict = field(default_factory=dict)
    macro: dict = field(default_factory=dict)
    n_gt: dict = field(default_factory=dict)
    n_images: dict = field(default_factory=dict)
    excluded_images: dict = field(default_factory=dict)
    per_image: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def methods(self):
        return list(self.micro)

    def ar(self, method: str, K: int, average: str = "micro") -> float:
        mat = (self.micro if average == "micro" else self.macro)[method]
        return float(mat[self.ks.index(K)].mean())

    def check_monotone(self) -> list:
        """Violations of recall monotonicity (empty list means the report is sound)."""
        bad = []
        for kind, table in (("micro", self.micro), ("macro", self.macro)):
            for m, mat in table.items():
                if np.any((mat < 0) | (mat > 1)):
                    bad.append(f"{kind}/{m}: recall outside [0, 1]")
                if np.any(np.diff(mat, axis=1) > 1e-12):
                    bad.append(f"{kind}/{m}: recall increases with IoU threshold")
                if np.any(np.diff(mat, axis=0) < -1e-12):
                    bad.append(f"{kind}/{m}: recall decreases with K")
        return bad

    def summary(self) -> dict:
        out = {}
        for m in self.methods:
            out[m] = {f"AR@{k}": self.ar(m, k) for k in self.ks}
            out[m].update({f"macroAR@{k}": self.ar(m, k, "macro") for k in self.ks})
            out[m]["n_gt"] = self.n_gt[m]
            out[m]["n_images"] = self.n_images[m]
            out[m]["excluded_images"] = self.excluded_images[m]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for m in self.methods:
            for i, k in enumerate(self.ks):
                for j, t in enumerate(self.thresholds):
                    w.writerow([m, k, f"{t:.2f}", repr(float(self.micro[m][i, j])), self.n_gt[m]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks), "thresholds": list(self.thresholds),
            "summary": self.summary(),
            "micro": {m: v.tolist() for m, v in self.micro.items()},
            "macro": {m: v.tolist() for m, v in self.macro.items()},
            "config": self.config,
        }


def evaluate_method(images, ks=K_VALUES, thresholds=IOU_THRESHOLDS):
    """Aggregate recall over ``images``, a list of ``(gts, proposals)`` pairs.

    Micro-average pools matches over every ground truth; macro-average is the
    mean of per-image recalls.  Images without ground truth are skipped.
    """
    matched = np.zeros((len(ks), len(thresholds)))
    per_image, total, excluded = [], 0, 0
    for gts, props in images:
        if len(gts) == 0:
            excluded += 1
            continue
        ious = iou_matrix(props, gts)
        counts = np.array([[greedy_matches(ious, k, t) for t in thresholds] for k in ks], dtype=float)
        matched += counts
        total += len(gts)
        per_image.append(counts / len(gts))
    micro = matched / total if total else np.zeros_like(matched)
    macro = np.mean(per_image, axis=0) if per_image else np.zeros_like(matched)
    return micro, macro, total, excluded, per_image


def evaluate(methods: dict, ks=K_VALUES, thresholds=IOU_THRESHOLDS, config=None) -> EvalReport:
    """Build an :class:`EvalReport` from ``{method: [(gts, proposals), ...]}``."""
    report = EvalReport(tuple(ks), tuple(thresholds), config=dict(config or {}))
    for name, images in methods.items():
        micro, macro, total, excluded, per_image = evaluate_method(images, ks, thresholds)
        if excluded:
            log.info("%s: %d image(s) without ground truth excluded", name, excluded)
        report.micro[name] = micro
        report.macro[name] = macro
        report.n_gt[name] = total
        report.n_images[name] = len(per_image)
        report.excluded_images[name] = excluded
        report.per_image[name] = per_image
    return report


def scale_sparsity_histogram(gts, image_size):
    """Bin objects by size relative to the image; returns (n_nonzero_bins, counts).

    The ratio is ``max(bw, bh) / max(w, h)``, binned into ten half-open
    intervals ``[0, 0.1), ..., [0.9, 1.0]``.
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError("image dimensions must be positive")
    longest = max(w, h)
    counts = np.zeros(10, dtype=int)
    for g in gts:
        _, _, bw, bh = _box(g)
        # scale before dividing so e.g. 30 px of 100 px lands exactly on bin 3
        idx = min(int(np.floor(max(bw, bh) * 10 / longest)), 9)
        counts[idx] += 1
    return int(np.count_nonzero(counts)), counts


def emit_curves(report: EvalReport, out_path, formats=("svg",)) -> list:
    """Write ``recall_curves.csv`` and one recall-vs-IoU plot per K into ``out_path``."""
    from .plotting import plot_recall_curves

    try:
        os.makedirs(out_path, exist_ok=True)
        csv_path = os.path.join(out_path, "recall_curves.csv")
        with open(csv_path, "w") as fh:
            fh.write(report.to_csv())
        return [csv_path] + plot_recall_curves(report, out_path, formats)
    except OSError as exc:
        raise IoFailure(f"could not write curves to {out_path}: {exc}") from exc
