"""Input validation for the estimator API (NCHW image batches, binary masks)."""

from __future__ import annotations

import numpy as np


def check_image_batch(X, bands: int | None = None, divisor: int | None = None) -> np.ndarray:
    """Validate and return an (N, bands, H, W) float32 array."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected a 4-D (n_samples, bands, height, width) array, got shape {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("empty batch")
    if bands is not None and X.shape[1] != bands:
        raise ValueError(f"expected {bands} bands, got {X.shape[1]}")
    if divisor is not None and (X.shape[2] % divisor or X.shape[3] % divisor):
        raise ValueError(f"spatial dims {X.shape[2]}x{X.shape[3]} must be divisible by {divisor}; "
                         f"pad or crop the inputs")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    return X


def check_mask_batch(y, X: np.ndarray) -> np.ndarray:
    """Validate and return (N, H, W) binary masks matching ``X``."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 3:
        raise ValueError(f"expected (n_samples, height, width) masks, got shape {y.shape}")
    if y.shape[0] != X.shape[0] or y.shape[1:] != X.shape[2:]:
        raise ValueError(f"mask shape {y.shape} does not match images {X.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary {0, 1}")
    return y.astype(np.uint8, copy=False)
