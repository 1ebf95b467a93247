"""Training objective: soft dice overlap plus binary cross-entropy.

Both terms see the probabilities clamped into [eps, 1-eps] so the loss stays
finite and differentiable at saturated predictions. The two terms carry equal
weight; the overlap term counters the cloud/background class imbalance.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, clamp, log, tmean, tsum

EPS = 1e-7


def dice_bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Scalar loss for probabilities ``pred`` against a binary ``target``."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: pred {pred.shape} vs target {target.shape}")
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if not np.isin(tdata, (0.0, 1.0)).all():
        raise ValueError("target must be strictly binary {0, 1}")
    p = clamp(pred, EPS, 1.0 - EPS)
    overlap = tsum(p * target)
    norm = tsum(p * p) + tsum(target * target)
    dice_term = 1.0 - (2.0 * overlap) / norm
    bce_term = -tmean(target * log(p) + (1.0 - target) * log(1.0 - p))
    return dice_term + bce_term
