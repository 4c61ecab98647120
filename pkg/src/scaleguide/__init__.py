"""Scale-guided object proposals: scale distributions, a trainable scale
predictor, synthetic shelf scenes, a scale-band proposer and recall metrics."""

__version__ = "0.1.0"

from .scale_math import (  # noqa: E402,F401
    ObjectSize,
    ScaleConfig,
    ScaleDistribution,
    ScaleSet,
    ground_truth_distribution,
    kl_divergence,
    object_scale,
    sample_scales,
    smooth,
    uniform_scale_set,
)
