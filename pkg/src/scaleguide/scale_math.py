"""Scale discretization, ground-truth scale distributions and scale-set sampling.

All scale math lives in "bin coordinates": an object of max side ``m`` needs
the image resized by ``g = D / m``, and sits at bin coordinate
``x = -sigma * log2(g)``.  Bins are consecutive integers ``b_min..b_max``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadRange,
    DegenerateDistribution,
    EmptyAnnotationSet,
    OutOfRange,
    SupportMismatch,
)

DEFAULT_IDEAL_SIZE = 640.0 / 7.0

# tolerance used when validating that a probability vector sums to one
SUM_TOL = 1e-9


@dataclass(frozen=True)
class ScaleConfig:
    b_min: int = -32
    b_max: int = 32
    sigma: int = 1
    ideal_size: float = DEFAULT_IDEAL_SIZE

    def __post_init__(self):
        if int(self.b_min) != self.b_min or int(self.b_max) != self.b_max:
            raise ValueError("bin bounds must be integers")
        if self.b_max <= self.b_min:
            raise ValueError(f"b_max ({self.b_max}) must exceed b_min ({self.b_min})")
        if int(self.sigma) != self.sigma or self.sigma < 1:
            raise ValueError(f"sigma must be a positive integer, got {self.sigma}")
        if not self.ideal_size > 0:
            raise ValueError(f"ideal_size must be positive, got {self.ideal_size}")

    @property
    def n_bins(self) -> int:
        return self.b_max - self.b_min + 1

    @property
    def bins(self) -> np.ndarray:
        return np.arange(self.b_min, self.b_max + 1, dtype=np.int64)

    def index_of(self, b: int) -> int:
        if not self.b_min <= b <= self.b_max:
            raise OutOfRange(f"bin {b} outside [{self.b_min}, {self.b_max}]")
        return int(b - self.b_min)

    def to_dict(self) -> dict:
        return {"b_min": int(self.b_min), "b_max": int(self.b_max),
                "sigma": int(self.sigma), "ideal_size": float(self.ideal_size)}


@dataclass(frozen=True)
class ObjectSize:
    """Max(width, height) of one object's bounding box, in pixels."""

    m: float

    def __post_init__(self):
        if not (math.isfinite(self.m) and self.m > 0):
            raise ValueError(f"object size must be a positive finite number, got {self.m}")


def object_scale(m: ObjectSize | float, cfg: ScaleConfig) -> float:
    """Resize factor that brings an object of size ``m`` to the ideal size."""
    size = m.m if isinstance(m, ObjectSize) else ObjectSize(float(m)).m
    return cfg.ideal_size / size


def bin_coordinate(m: ObjectSize | float, cfg: ScaleConfig) -> float:
    """Continuous bin coordinate ``-sigma * log2(D / m)`` of an object."""
    return -cfg.sigma * math.log2(object_scale(m, cfg))


def scale_to_coordinate(s: float, cfg: ScaleConfig) -> float:
    return -cfg.sigma * math.log2(s)


def coordinate_to_scale(x, cfg: ScaleConfig):
    return np.exp2(-np.asarray(x, dtype=float) / cfg.sigma)


class ScaleDistribution:
    """Immutable probability vector over the bins of a :class:`ScaleConfig`."""

    __slots__ = ("config", "_probs")

    def __init__(self, config: ScaleConfig, probs: Iterable[float]):
        arr = np.array(probs, dtype=float)
        if arr.ndim != 1 or arr.shape[0] != config.n_bins:
            raise ValueError(f"expected {config.n_bins} probabilities, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(arr.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"probabilities sum to {arr.sum()!r}, not 1")
        arr.setflags(write=False)
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "_probs", arr)

    def __setattr__(self, name, value):
        raise AttributeError("ScaleDistribution is immutable")

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    def __getitem__(self, b: int) -> float:
        return float(self._probs[self.config.index_of(b)])

    def __eq__(self, other):
        if not isinstance(other, ScaleDistribution):
            return NotImplemented
        return self.config == other.config and np.array_equal(self._probs, other._probs)

    def __hash__(self):
        return hash((self.config, self._probs.tobytes()))

    def __repr__(self):
        nz = {int(b): round(float(p), 6) for b, p in zip(self.config.bins, self._probs) if p > 0}
        return f"ScaleDistribution({nz})"

    @classmethod
    def delta(cls, config: ScaleConfig, b: int) -> "ScaleDistribution":
        probs = np.zeros(config.n_bins)
        probs[config.index_of(b)] = 1.0
        return cls(config, probs)

    @classmethod
    def uniform(cls, config: ScaleConfig) -> "ScaleDistribution":
        return cls(config, np.full(config.n_bins, 1.0 / config.n_bins))

    @classmethod
    def from_bins(cls, config: ScaleConfig, mass: dict) -> "ScaleDistribution":
        """Build from a ``{bin: probability}`` mapping; missing bins are zero."""
        probs = np.zeros(config.n_bins)
        for b, p in mass.items():
            probs[config.index_of(b)] = p
        return cls(config, probs)

    @property
    def support(self) -> np.ndarray:
        return self.config.bins[self._probs > 0]

    def argmax_bin(self) -> int:
        return int(self.config.bins[int(np.argmax(self._probs))])

    def to_dict(self) -> dict:
        d = self.config.to_dict()
        d["probs"] = [float(p) for p in self._probs]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleDistribution":
        cfg = ScaleConfig(int(d["b_min"]), int(d["b_max"]), int(d["sigma"]), float(d["ideal_size"]))
        return cls(cfg, d["probs"])

    @classmethod
    def from_json(cls, text: str) -> "ScaleDistribution":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ScaleSet:
    """Resize factors, sorted from largest to smallest."""

    scales: tuple = field(default_factory=tuple)

    def __post_init__(self):
        vals = tuple(float(s) for s in self.scales)
        if not vals:
            raise ValueError("a scale set needs at least one scale")
        if any(not (math.isfinite(s) and s > 0) for s in vals):
            raise ValueError(f"scales must be positive and finite: {vals}")
        if any(a < b for a, b in zip(vals, vals[1:])):
            raise ValueError(f"scales must be sorted descending: {vals}")
        object.__setattr__(self, "scales", vals)

    def __len__(self):
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def to_dict(self) -> dict:
        return {"scales": list(self.scales)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleSet":
        return cls(tuple(sorted((float(s) for s in d["scales"]), reverse=True)))


def _coordinates(sizes: Sequence, cfg: ScaleConfig) -> np.ndarray:
    if len(sizes) == 0:
        raise EmptyAnnotationSet("cannot build a scale distribution from zero objects")
    m = np.array([s.m if isinstance(s, ObjectSize) else float(s) for s in sizes], dtype=float)
    if np.any(~np.isfinite(m)) or np.any(m <= 0):
        raise ValueError("object sizes must be positive and finite")
    x = -cfg.sigma * np.log2(cfg.ideal_size / m)
    bad = (x <= cfg.b_min) | (x >= cfg.b_max)
    if np.any(bad):
        raise OutOfRange(
            f"{int(bad.sum())} object(s) fall outside the open bin range "
            f"({cfg.b_min}, {cfg.b_max}); first offending coordinate {x[bad][0]:.4f}")
    return x


def ground_truth_distribution(sizes: Sequence, cfg: ScaleConfig) -> ScaleDistribution:
    """Triangular-kernel histogram of object bin coordinates, normalized.

    Each object spreads unit weight over the (at most two) integer bins
    bracketing its coordinate, linearly in distance.
    """
    x = _coordinates(sizes, cfg)
    lower = np.floor(x)
    frac = x - lower
    idx = (lower - cfg.b_min).astype(np.int64)
    weights = np.zeros(cfg.n_bins)
    np.add.at(weights, idx, 1.0 - frac)
    # frac == 0 adds nothing to the upper bin; x < b_max keeps idx+1 in range
    np.add.at(weights, idx + 1, frac)
    return ScaleDistribution(cfg, weights / weights.sum())


def kl_divergence(q: ScaleDistribution, p: ScaleDistribution) -> float:
    """``sum_i p_i (log p_i - log q_i)`` in nats, with ``0 log 0 = 0``."""
    if q.config != p.config:
        raise ValueError("distributions are defined over different bin configurations")
    mask = p.probs > 0
    if np.any(q.probs[mask] == 0):
        raise SupportMismatch("q assigns zero probability to a bin in the support of p")
    pm, qm = p.probs[mask], q.probs[mask]
    return max(0.0, float(np.sum(pm * (np.log(pm) - np.log(qm)))))


def smooth(q: ScaleDistribution, lam: float) -> ScaleDistribution:
    """Raise probabilities to ``lam`` and renormalize; zero bins stay zero."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"smoothing exponent must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return q
    support = q.probs > 0
    powered = np.zeros_like(q.probs)
    powered[support] = 1.0 if lam == 0.0 else np.power(q.probs[support], lam)
    total = powered.sum()
    if not total > 0:
        raise DegenerateDistribution("distribution has no mass after exponentiation")
    return ScaleDistribution(q.config, powered / total)


def quantile_coordinates(q: ScaleDistribution, h: int) -> np.ndarray:
    """Bin coordinates ``x_i`` with ``F(x_i) = i / (h + 1)``, ``i = 1..h``.

    ``q`` is read as a piecewise-constant density on ``[b - 0.5, b + 0.5)``.
    Where ``F`` is flat the smallest solution (left edge of the gap) is used.
    """
    if int(h) != h or h < 1:
        raise ValueError(f"h must be a positive integer, got {h}")
    probs = q.probs
    cum = np.concatenate(([0.0], np.cumsum(probs)))
    targets = np.arange(1, h + 1) / (h + 1)
    # first bin whose right-edge cumulative reaches the target
    k = np.searchsorted(cum[1:], targets, side="left")
    k = np.minimum(k, len(probs) - 1)
    left_edge = q.config.b_min + k - 0.5
    x = left_edge + (targets - cum[k]) / probs[k]
    return x


def sample_scales(q: ScaleDistribution, h: int) -> ScaleSet:
    """Pick ``h`` resize factors at evenly spaced quantiles of ``q``."""
    x = quantile_coordinates(q, h)
    return ScaleSet(tuple(coordinate_to_scale(x, q.config)))


def uniform_scale_set(h: int, s_lo: float, s_hi: float) -> ScaleSet:
    """Geometrically spaced scales from ``s_hi`` down to ``s_lo`` inclusive."""
    if not 0 < s_lo < s_hi:
        raise BadRange(f"need 0 < s_lo < s_hi, got s_lo={s_lo}, s_hi={s_hi}")
    if int(h) != h or h < 2:
        raise ValueError(f"a uniform scale set needs h >= 2, got {h}")
    return ScaleSet(tuple(np.geomspace(s_hi, s_lo, int(h))))
