"""Scale-distribution predictor: a per-cell two-layer transform, global average
pooling and a softmax, trained by minimizing KL(target || prediction).

Patch features stand in for a CNN backbone.  They are computed from the
visible box outlines of a scene, letterboxed into a square canvas.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import Diverged, ShapeMismatch
from .scale_math import ScaleConfig, ScaleDistribution

log = logging.getLogger(__name__)

PARAMS_FORMAT = "scaleguide.predictor-params"
PARAMS_VERSION = 1
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class FeatureConfig:
    grid: int = 6
    cell_px: int = 32
    n_features: int = 16
    max_radius: float = 48.0

    @property
    def canvas(self) -> int:
        return self.grid * self.cell_px

    @property
    def radii(self) -> np.ndarray:
        return np.geomspace(1.0, self.max_radius, self.n_features - 1)


@dataclass
class PatchGrid:
    features: np.ndarray  # (grid_h, grid_w, f)
    empty: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 3:
            raise ShapeMismatch(f"patch grid must be (h, w, f), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("patch features must be finite")

    @property
    def cells(self) -> np.ndarray:
        """Row-major (h*w, f) view of the cell features."""
        h, w, f = self.features.shape
        return self.features.reshape(h * w, f)


def rasterize(scene, fcfg: FeatureConfig = FeatureConfig()):
    """Letterbox the viewport into the canvas; return (edges, occupancy) masks.

    The viewport is scaled so its long side spans the canvas and centred;
    padding stays zero.  A pixel belongs to a box when its centre lies inside.
    """
    n = fcfg.canvas
    vw, vh = scene.viewport
    c = n / max(vw, vh)
    ox, oy = (n - vw * c) / 2, (n - vh * c) / 2
    edges = np.zeros((n, n), dtype=bool)
    occ = np.zeros((n, n), dtype=bool)
    for a in scene.annotations:
        x, y, w, h = a.bbox
        i0 = int(math.ceil(x * c + ox - 0.5))
        i1 = int(math.ceil((x + w) * c + ox - 0.5))
        j0 = int(math.ceil(y * c + oy - 0.5))
        j1 = int(math.ceil((y + h) * c + oy - 0.5))
        i0, j0 = max(i0, 0), max(j0, 0)
        i1, j1 = min(i1, n), min(j1, n)
        if i1 <= i0 or j1 <= j0:
            continue
        occ[j0:j1, i0:i1] = True
        edges[j0, i0:i1] = edges[j1 - 1, i0:i1] = True
        edges[j0:j1, i0] = edges[j0:j1, i1 - 1] = True
    return edges, occ


def featurize(scene, fcfg: FeatureConfig = FeatureConfig()) -> PatchGrid:
    """Per-cell multi-radius edge densities plus box occupancy.

    For each radius ``r`` the feature is the fraction of cell pixels lying
    within distance ``r`` of a box outline; the last feature is the fraction
    of cell pixels covered by any box.
    """
    g, cp = fcfg.grid, fcfg.cell_px
    if not scene.annotations:
        log.warning("scene %s has no visible objects; emitting an empty grid", scene.image_id)
        return PatchGrid(np.zeros((g, g, fcfg.n_features)), empty=True)
    edges, occ = rasterize(scene, fcfg)
    dist = ndimage.distance_transform_edt(~edges)
    feats = np.empty((g, g, fcfg.n_features))
    blocks = lambda a: a.reshape(g, cp, g, cp).mean(axis=(1, 3))  # noqa: E731
    for k, r in enumerate(fcfg.radii):
        feats[:, :, k] = blocks((dist <= r).astype(float))
    feats[:, :, -1] = blocks(occ.astype(float))
    return PatchGrid(feats)


@dataclass
class PredictorParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    scale_config: ScaleConfig = field(default_factory=ScaleConfig)

    def __post_init__(self):
        f, d1 = self.w1.shape
        if self.b1.shape != (d1,) or self.w2.shape[0] != d1:
            raise ShapeMismatch("first stage shapes are inconsistent")
        d2 = self.w2.shape[1]
        if self.b2.shape != (d2,) or self.w3.shape[0] != d2:
            raise ShapeMismatch("second stage shapes are inconsistent")
        if self.w3.shape[1] != self.scale_config.n_bins or self.b3.shape != (self.scale_config.n_bins,):
            raise ShapeMismatch(f"output stage must map to {self.scale_config.n_bins} bins")

    @classmethod
    def init(cls, n_features=16, d1=64, d2=64, scale_config=None, rng=None, init_range=0.05):
        scale_config = scale_config or ScaleConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        l = scale_config.n_bins
        u = lambda *shape: rng.uniform(-init_range, init_range, size=shape)  # noqa: E731
        return cls(u(n_features, d1), np.zeros(d1), u(d1, d2), np.zeros(d2),
                   u(d2, l), np.zeros(l), scale_config)

    @classmethod
    def zeros(cls, n_features=16, d1=64, d2=64, scale_config=None):
        scale_config = scale_config or ScaleConfig()
        l = scale_config.n_bins
        return cls(np.zeros((n_features, d1)), np.zeros(d1), np.zeros((d1, d2)),
                   np.zeros(d2), np.zeros((d2, l)), np.zeros(l), scale_config)

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "PredictorParams":
        return PredictorParams(**{k: v.copy() for k, v in self.arrays().items()},
                               scale_config=self.scale_config)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def to_dict(self) -> dict:
        return {
            "format": PARAMS_FORMAT,
            "version": PARAMS_VERSION,
            "scale_config": self.scale_config.to_dict(),
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel(order="C").tolist()}
                        for k, v in self.arrays().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorParams":
        if d.get("format") != PARAMS_FORMAT:
            raise ValueError("not a predictor parameter document")
        if d.get("version") != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter version {d.get('version')}")
        sc = d["scale_config"]
        cfg = ScaleConfig(sc["b_min"], sc["b_max"], sc["sigma"], sc["ideal_size"])
        arrs = {k: np.array(t["data"], dtype=float).reshape(t["shape"])
                for k, t in d["tensors"].items()}
        return cls(**{k: arrs[k] for k in PARAM_NAMES}, scale_config=cfg)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PredictorParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _pool(z: np.ndarray) -> np.ndarray:
    # sorting each column first makes the sum independent of cell order, bit for bit
    return np.sort(z, axis=0).sum(axis=0) / z.shape[0]


def _forward_cache(cells: np.ndarray, params: PredictorParams):
    if cells.shape[1] != params.w1.shape[0]:
        raise ShapeMismatch(f"grid has {cells.shape[1]} features per cell, "
                            f"params expect {params.w1.shape[0]}")
    a1 = cells @ params.w1 + params.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(a2, 0.0)
    z = h2 @ params.w3 + params.b3
    logits = _pool(z)
    shifted = logits - logits.max()
    log_q = shifted - np.log(np.exp(shifted).sum())
    return a1, h1, a2, h2, log_q


def forward_logprobs(grid: PatchGrid, params: PredictorParams) -> np.ndarray:
    return _forward_cache(grid.cells, params)[-1]


def forward(grid: PatchGrid, params: PredictorParams) -> ScaleDistribution:
    log_q = forward_logprobs(grid, params)
    q = np.exp(log_q)
    return ScaleDistribution(params.scale_config, q / q.sum())


def loss_and_gradient(grid: PatchGrid, target: ScaleDistribution, params: PredictorParams):
    """KL(target || forward(grid)) and its gradient w.r.t. every parameter.

    Returns ``(loss, grads)`` where ``grads`` maps parameter names to arrays of
    the same shape.
    """
    if target.config != params.scale_config:
        raise ShapeMismatch("target and predictor use different bin configurations")
    cells = grid.cells
    a1, h1, a2, h2, log_q = _forward_cache(cells, params)
    p = target.probs
    mask = p > 0
    loss = float(np.sum(p[mask] * (np.log(p[mask]) - log_q[mask])))
    n = cells.shape[0]
    # d loss / d pooled logits = q - p; pooling spreads it evenly over cells
    dlogits = np.exp(log_q) - p
    dz = np.broadcast_to(dlogits / n, (n, dlogits.shape[0]))
    grads = {"w3": h2.T @ dz, "b3": dlogits.copy()}
    dh2 = dz @ params.w3.T
    da2 = dh2 * (a2 > 0)
    grads["w2"] = h1.T @ da2
    grads["b2"] = da2.sum(axis=0)
    dh1 = da2 @ params.w2.T
    da1 = dh1 * (a1 > 0)
    grads["w1"] = cells.T @ da1
    grads["b1"] = da1.sum(axis=0)
    return max(loss, 0.0), grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 8
    rng_seed: int = 0
    sampling_mode: str = "per_annotation"
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.sampling_mode not in ("per_image", "per_annotation"):
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")


@dataclass
class TrainResult:
    params: PredictorParams
    losses: list

    def loss_csv(self) -> str:
        lines = ["epoch,mean_loss"]
        lines += [f"{i + 1},{loss!r}" for i, loss in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def sampling_weights(annotation_counts, mode: str) -> np.ndarray:
    """Per-image sampling probabilities.

    ``per_image`` is uniform over images; ``per_annotation`` weights each image
    by its annotation count so every annotation is equally likely to be drawn.
    """
    counts = np.asarray(annotation_counts, dtype=float)
    if mode == "per_image":
        w = np.ones_like(counts)
    elif mode == "per_annotation":
        w = counts.copy()
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    if w.sum() <= 0:
        raise ValueError("no image has a positive sampling weight")
    return w / w.sum()


def train(dataset, cfg: TrainConfig, fcfg: FeatureConfig = FeatureConfig(),
          scale_config: ScaleConfig | None = None, init: PredictorParams | None = None) -> TrainResult:
    """Minibatch SGD on KL loss.

    ``dataset`` holds ``(scene, target)`` pairs; scenes may also be given as
    precomputed :class:`PatchGrid` objects (sampling weight 1 each under
    ``per_annotation`` unless the grid was built from a scene).
    """
    if not dataset:
        raise ValueError("training set is empty")
    scale_config = scale_config or dataset[0][1].config
    grids, targets, counts = [], [], []
    for item, target in dataset:
        if isinstance(item, PatchGrid):
            grids.append(item)
            counts.append(1)
        else:
            grids.append(featurize(item, fcfg))
            counts.append(len(item.annotations))
        targets.append(target)
    weights = sampling_weights(counts, cfg.sampling_mode)
    rng = np.random.default_rng(cfg.rng_seed)
    params = init.copy() if init is not None else PredictorParams.init(
        grids[0].features.shape[-1], cfg.hidden[0], cfg.hidden[1], scale_config, rng)
    steps = max(1, math.ceil(len(grids) / cfg.batch_size))
    losses = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for _ in range(steps):
            batch = rng.choice(len(grids), size=cfg.batch_size, p=weights)
            acc = {k: np.zeros_like(v) for k, v in params.arrays().items()}
            for i in batch:
                loss, grads = loss_and_gradient(grids[i], targets[i], params)
                total += loss
                seen += 1
                for k in acc:
                    acc[k] += grads[k]
            for k, g in acc.items():
                getattr(params, k)[...] -= cfg.learning_rate * g / len(batch)
            if not (math.isfinite(total) and params.is_finite()):
                raise Diverged(f"non-finite loss or parameters in epoch {epoch + 1}")
        losses.append(total / seen)
        log.debug("epoch %d mean loss %.6f", epoch + 1, losses[-1])
    return TrainResult(params, losses)
