"""scikit-learn style estimator wrapping the segmentation network.

``CloudSegmenter`` takes image batches as (n_samples, bands, height, width)
arrays and binary masks as (n_samples, height, width); it composes with the
usual sklearn machinery (get_params/set_params, clone, pipelines whose final
step consumes image batches).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Patch
from .metrics import ConfusionCounts, confusion, metrics
from .model import CloudSegModel, ModelConfig
from .train import TrainConfig, train
from .validation import check_image_batch, check_mask_batch

_PRESETS = {"tiny": ModelConfig.tiny, "reference": ModelConfig.reference}


class CloudSegmenter(BaseEstimator):
    """Per-pixel binary cloud segmentation.

    Parameters
    ----------
    preset : {"tiny", "reference"}
        Architecture scale. "tiny" trains in minutes on a CPU; "reference"
        is the full-size network.
    lr0, momentum, batch_size, epochs, max_steps, val_fraction, seed
        Optimiser settings (polynomial learning-rate decay from lr0 to 0).
    threshold
        Probability cut for ``predict``; pixels at or above it are cloud.
    """

    def __init__(self, preset: str = "tiny", lr0: float = 0.1, momentum: float = 0.9,
                 batch_size: int = 8, epochs: int = 25, max_steps: int | None = 500,
                 threshold: float = 0.5, val_fraction: float = 0.0, seed: int = 0):
        self.preset = preset
        self.lr0 = lr0
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.threshold = threshold
        self.val_fraction = val_fraction
        self.seed = seed

    def _require_fitted(self) -> CloudSegModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("this CloudSegmenter is not fitted yet; call fit first")
        return self.model_

    def fit(self, X, y) -> "CloudSegmenter":
        if self.preset not in _PRESETS:
            raise ValueError(f"unknown preset '{self.preset}'; choose from {sorted(_PRESETS)}")
        X = check_image_batch(X)
        y = check_mask_batch(y, X)
        config = _PRESETS[self.preset](bands=X.shape[1], threshold=self.threshold, seed=self.seed)
        check_image_batch(X, divisor=config.deep_stride)
        model = CloudSegModel(config)
        patches = [Patch(f"sample-{i}", 0, 0, X[i], y[i]) for i in range(X.shape[0])]
        tcfg = TrainConfig(lr0=self.lr0, momentum=self.momentum, batch_size=self.batch_size,
                           epochs=self.epochs, max_steps=self.max_steps,
                           val_fraction=self.val_fraction, seed=self.seed)
        result = train(model, patches, tcfg)
        self.model_ = model
        self.config_ = config
        self.train_result_ = result
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        model = self._require_fitted()
        X = check_image_batch(X, bands=self.config_.bands, divisor=self.config_.deep_stride)
        return model.predict_proba(X)

    def predict(self, X) -> np.ndarray:
        model = self._require_fitted()
        X = check_image_batch(X, bands=self.config_.bands, divisor=self.config_.deep_stride)
        return model.predict_mask(X, threshold=self.threshold)

    def score(self, X, y) -> float:
        """Cloud-class intersection-over-union of the thresholded predictions."""
        X = check_image_batch(X)
        y = check_mask_batch(y, X)
        preds = self.predict(X)
        counts = ConfusionCounts()
        for p, t in zip(preds, y):
            counts = counts + confusion(p, t)
        iou = metrics(counts).miou
        return float("nan") if iou is None else iou
