"""Proposal generation over a scale set.

The built-in proposer is a scale-band oracle: an object is found at resize
factor ``s`` only when its resized size lands within ``tau`` bins of the
ideal size, which mimics how scale-sensitive CNN proposers behave.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import MissingPredictor, NonZeroExit, ProtocolViolation
from .scale_math import (
    ScaleConfig,
    ScaleDistribution,
    ScaleSet,
    ground_truth_distribution,
    sample_scales,
    smooth,
    uniform_scale_set,
)

MODES = ("guided_gt", "guided_predictor", "exhaustive")
EXHAUSTIVE_RANGE = (1 / 16, 2.0)
SUPERMARKET_DEFAULTS = {"h": 6, "lam": 0.9}
GENERAL_DEFAULTS = {"h": 10, "lam": 0.25}


@dataclass(frozen=True)
class Proposal:
    bbox: tuple
    score: float
    source_scale: float

    def __post_init__(self):
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"proposal box must have positive size: {self.bbox}")
        if not math.isfinite(self.score):
            raise ValueError("proposal score must be finite")

    def to_dict(self) -> dict:
        return {"bbox": [float(v) for v in self.bbox], "score": float(self.score),
                "source_scale": float(self.source_scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "Proposal":
        return cls(tuple(float(v) for v in d["bbox"]), float(d["score"]), float(d["source_scale"]))


@dataclass(frozen=True)
class OracleConfig:
    tau: float = 0.5
    localization_noise: float = 0.05
    false_positive_rate: float = 0.5
    miss_rate: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.localization_noise < 0 or self.false_positive_rate < 0:
            raise ValueError("noise and false positive rate must be non-negative")
        if not 0 <= self.miss_rate < 1:
            raise ValueError("miss_rate must lie in [0, 1)")

    @classmethod
    def noiseless(cls, **kw) -> "OracleConfig":
        return cls(localization_noise=0.0, false_positive_rate=0.0, miss_rate=0.0, **kw)


def band_offset(m: float, s: float, scale_cfg: ScaleConfig) -> float:
    """Signed distance, in bins, of an object resized by ``s`` from the ideal size."""
    return scale_cfg.sigma * math.log2(s * m / scale_cfg.ideal_size)


def detectable(m: float, scales, tau: float, scale_cfg: ScaleConfig) -> bool:
    return any(abs(band_offset(m, s, scale_cfg)) <= tau for s in scales)


def _clip_box(box, viewport):
    x, y, w, h = box
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, float(viewport[0])), min(y + h, float(viewport[1]))
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def oracle_propose(scene, scales: ScaleSet, cfg: OracleConfig, scale_cfg: ScaleConfig,
                   rng: np.random.Generator | None = None) -> list:
    """Simulated proposals for ``scene`` at each resize factor in ``scales``.

    Localization jitter grows with band offset: its standard deviation is
    ``localization_noise * (1 + 2 * |offset| / tau)`` on the centre (relative
    to box size) and on log width/height.  A ground-truth object contributes
    at most one proposal, from the scale that scored it highest.
    """
    if len(scales) == 0:
        raise ValueError("scale set is empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    vw, vh = scene.viewport
    best = {}
    spurious = []
    for s in scales:
        for k, a in enumerate(scene.annotations):
            off = band_offset(a.size, s, scale_cfg)
            if abs(off) > cfg.tau:
                continue
            if cfg.miss_rate > 0 and rng.random() < cfg.miss_rate:
                continue
            rel = abs(off) / cfg.tau
            x, y, w, h = a.bbox
            box = (x, y, w, h)
            score = 1.0 - rel
            if cfg.localization_noise > 0:
                sd = cfg.localization_noise * (1.0 + 2.0 * rel)
                dx, dy, dw, dh = rng.normal(0.0, sd, size=4)
                nw, nh = w * math.exp(dw), h * math.exp(dh)
                cx, cy = x + w / 2 + dx * w, y + h / 2 + dy * h
                box = _clip_box((cx - nw / 2, cy - nh / 2, nw, nh), scene.viewport)
                if box is None:
                    continue
                score = score * (1.0 - min(1.0, abs(float(rng.normal(0.0, cfg.localization_noise)))))
            score = min(1.0, max(0.0, score))
            if k not in best or score > best[k].score:
                best[k] = Proposal(tuple(float(v) for v in box), float(score), float(s))
        if cfg.false_positive_rate > 0:
            for _ in range(int(rng.poisson(cfg.false_positive_rate))):
                side = scale_cfg.ideal_size / s * math.exp(float(rng.normal(0.0, 0.3)))
                cx, cy = rng.uniform(0, vw), rng.uniform(0, vh)
                box = _clip_box((cx - side / 2, cy - side / 2, side, side), scene.viewport)
                if box is not None:
                    spurious.append(Proposal(tuple(float(v) for v in box),
                                             float(rng.uniform(0.0, 0.5)), float(s)))
    return dedupe(list(best.values()) + spurious)


def dedupe(proposals) -> list:
    """Keep the best score per identical box, sorted by descending score (stable)."""
    by_box = {}
    for p in proposals:
        if p.bbox not in by_box or p.score > by_box[p.bbox].score:
            by_box[p.bbox] = p
    return sorted(by_box.values(), key=lambda p: -p.score)


def detectable_fraction(scene, scales, tau: float, scale_cfg: ScaleConfig) -> float:
    """Closed-form recall of the noiseless oracle."""
    if not scene.annotations:
        return 1.0
    hits = sum(detectable(a.size, scales, tau, scale_cfg) for a in scene.annotations)
    return hits / len(scene.annotations)


def choose_scales(scene, mode: str, h: int = 6, lam: float = 0.9,
                  scale_cfg: ScaleConfig | None = None, params=None, feature_cfg=None,
                  exhaustive_range=EXHAUSTIVE_RANGE) -> ScaleSet:
    """Scale set for ``scene`` under one of the pipeline modes."""
    scale_cfg = scale_cfg or ScaleConfig()
    if mode == "exhaustive":
        return uniform_scale_set(h, *exhaustive_range)
    if mode == "guided_gt":
        if not scene.annotations:
            q = ScaleDistribution.uniform(scale_cfg)
        else:
            q = ground_truth_distribution([a.size for a in scene.annotations], scale_cfg)
    elif mode == "guided_predictor":
        if params is None:
            raise MissingPredictor("guided_predictor mode needs trained predictor parameters")
        from .predictor import FeatureConfig, featurize, forward
        q = forward(featurize(scene, feature_cfg or FeatureConfig()), params)
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return sample_scales(smooth(q, lam), h)


def run_pipeline(scene, mode: str, h: int = 6, lam: float = 0.9,
                 scale_cfg: ScaleConfig | None = None, oracle_cfg: OracleConfig | None = None,
                 params=None, feature_cfg=None, rng=None, external=None,
                 exhaustive_range=EXHAUSTIVE_RANGE) -> list:
    """Choose scales for ``scene`` and run a proposer over them.

    ``external`` is an optional path to an executable following the external
    proposer contract; otherwise the scale-band oracle is used.
    """
    scale_cfg = scale_cfg or ScaleConfig()
    scales = choose_scales(scene, mode, h, lam, scale_cfg, params, feature_cfg, exhaustive_range)
    if external is not None:
        return run_external(external, scene, scales)
    return oracle_propose(scene, scales, oracle_cfg or OracleConfig(), scale_cfg, rng)


def parse_proposals(doc) -> list:
    if not isinstance(doc, list):
        raise ProtocolViolation("proposal document must be a JSON list")
    out = []
    for i, item in enumerate(doc):
        try:
            bbox = item["bbox"]
            if len(bbox) != 4:
                raise ValueError("bbox needs four numbers")
            out.append(Proposal(tuple(float(v) for v in bbox), float(item["score"]),
                                float(item["source_scale"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolViolation(f"proposal {i} is malformed: {exc}") from exc
    return sorted(out, key=lambda p: -p.score)


def external_propose(scene_path, scales_path, result_path, executable=None, timeout=None) -> list:
    """Ingest proposals written by an external proposer.

    When ``executable`` is given it is first invoked as
    ``executable scene.json scales.json out.json`` and must exit 0.
    """
    if executable is not None:
        proc = subprocess.run([*_argv(executable), str(scene_path), str(scales_path), str(result_path)],
                              capture_output=True, text=True, timeout=timeout)
        if proc.returncode != 0:
            raise NonZeroExit(proc.returncode, proc.stderr)
    try:
        with open(result_path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ProtocolViolation(f"external proposer wrote no result at {result_path}") from exc
    except json.JSONDecodeError as exc:
        raise ProtocolViolation(f"result is not valid JSON: {exc}") from exc
    return parse_proposals(doc)


def _argv(executable):
    return list(executable) if isinstance(executable, (list, tuple)) else [str(executable)]


def run_external(executable, scene, scales: ScaleSet) -> list:
    with tempfile.TemporaryDirectory(prefix="scaleguide-") as tmp:
        scene_path = os.path.join(tmp, "scene.json")
        scales_path = os.path.join(tmp, "scales.json")
        out_path = os.path.join(tmp, "out.json")
        with open(scene_path, "w") as fh:
            json.dump(scene.to_dict(), fh)
        with open(scales_path, "w") as fh:
            json.dump(scales.to_dict(), fh)
        return external_propose(scene_path, scales_path, out_path, executable)
