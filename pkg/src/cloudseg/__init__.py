"""Lightweight CNN-Transformer cloud segmentation.

A from-scratch autodiff tensor core, a hybrid convolution/attention encoder
with a shared-dilated feature pyramid and gated skip connections, an exact
parameter/MAC profiler, a synthetic-scene data pipeline and a training
harness, fronted by a scikit-learn style estimator.
"""

from .estimator import CloudSegmenter
from .metrics import ConfusionCounts, MetricSet, confusion, metrics
from .model import CloudSegModel, ModelConfig, load_checkpoint, save_checkpoint
from .profiler import CostReport, cost
from .tensor import Tensor, no_grad
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CloudSegmenter",
    "CloudSegModel",
    "ModelConfig",
    "TrainConfig",
    "Tensor",
    "ConfusionCounts",
    "MetricSet",
    "CostReport",
    "confusion",
    "metrics",
    "cost",
    "train",
    "no_grad",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
