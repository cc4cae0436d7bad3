"""Differentially private, Byzantine-robust federated learning with Count-Sketch compression."""

from .aggregators import AggregatorSpec, aggregate, empirical_kappa, robust_compat_check
from .attacks import AttackSpec
from .fedsim import TrainConfig, train
from .sketch import CountSketch, sketch_for_rate
from .tensor import Dataset, ModelSpec

__all__ = [
    "AggregatorSpec",
    "AttackSpec",
    "CountSketch",
    "Dataset",
    "ModelSpec",
    "TrainConfig",
    "aggregate",
    "empirical_kappa",
    "robust_compat_check",
    "sketch_for_rate",
    "train",
]
