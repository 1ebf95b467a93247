"""Training loop (SGD + momentum, polynomial LR decay) and evaluation.

The learning rate follows lr0 * (1 - step/total)^power, i.e. it starts at
lr0 and reaches exactly zero on the last step. Evaluation accumulates pixel
confusion counts patch by patch and merges them, so patched and whole-scene
metrics agree exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .data import Patch, Scene, crop, stitch
from .losses import dice_bce_loss
from .metrics import ConfusionCounts, MetricSet, confusion, metrics
from .model import CloudSegModel, save_checkpoint
from .tensor import ShapeError, Tensor

DESK_BATCH_SIZE = 8


@dataclass
class TrainConfig:
    """Optimiser settings; defaults are the full-scale recipe ("paper" preset)."""

    lr0: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    poly_power: float = 0.9
    seed: int = 0
    weight_decay: float = 0.0
    augment: bool = False   # random horizontal/vertical patch flips
    val_fraction: float = 0.1
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-scale settings: small batches, short schedules."""
        base = dict(batch_size=DESK_BATCH_SIZE, epochs=25, lr0=0.1)
        base.update(overrides)
        return cls(**base)


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if step > total_steps:
        raise ValueError(f"step {step} exceeds total_steps {total_steps}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    frac = 1.0 - step / total_steps
    return cfg.lr0 * frac ** cfg.poly_power


class SGD:
    """Momentum SGD: v <- mu*v + g, w <- w - lr*v."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    steps: int
    final_train_loss: float
    loss_curve_csv: str
    val_metrics: MetricSet | None


def split_patches(patches: list[Patch], val_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(patches))
    n_val = int(round(len(patches) * val_fraction))
    val_idx = set(order[:n_val].tolist())
    train = [patches[i] for i in order[n_val:]]
    val = [patches[i] for i in sorted(val_idx)]
    return train, val


def _batches(n: int, batch_size: int, epochs_needed: int, seed: int):
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs_needed):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def train(model: CloudSegModel, patches: list[Patch], cfg: TrainConfig,
          checkpoint_path=None, log=None) -> TrainResult:
    """Optimise ``model`` on patch arrays; returns the per-step loss curve."""
    if not patches:
        raise ValueError("training set is empty")
    train_set, val_set = split_patches(patches, cfg.val_fraction, cfg.seed)
    if not train_set:
        raise ValueError("training split is empty; lower val_fraction")
    x_all = np.stack([p.bands for p in train_set]).astype(np.float32)
    y_all = np.stack([p.mask for p in train_set]).astype(np.float32)[:, None]

    steps_per_epoch = (len(train_set) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    optimizer = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    model.train(True)
    curve = io.StringIO()
    curve.write("step,epoch,lr,loss\n")
    loss_value = float("nan")
    batch_iter = _batches(len(train_set), cfg.batch_size, cfg.epochs, cfg.seed)
    flip_rng = np.random.default_rng(cfg.seed + 2)
    for step in range(total_steps):
        idx = next(batch_iter)
        lr = lr_schedule(step, total_steps, cfg)
        xb, yb = x_all[idx], y_all[idx]
        if cfg.augment:
            flips = flip_rng.uniform(size=2) < 0.5
            axes = tuple(ax for ax, f in zip((-2, -1), flips) if f)
            if axes:
                xb, yb = np.flip(xb, axes), np.flip(yb, axes)
        x = Tensor(np.ascontiguousarray(xb), dtype=model.dtype)
        y = Tensor(np.ascontiguousarray(yb), dtype=model.dtype)
        try:
            loss = dice_bce_loss(model(x), y)
        except ShapeError as exc:
            if "non-finite" in str(exc):
                raise RuntimeError(f"non-finite activations at step {step}; "
                                   f"lower lr0 (currently {cfg.lr0}) or check the data") from exc
            raise
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise RuntimeError(f"non-finite loss {loss_value} at step {step}; "
                               f"lower lr0 (currently {cfg.lr0}) or check the data")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(lr)
        curve.write(f"{step},{step // steps_per_epoch},{lr:.10g},{loss_value:.10g}\n")
        if log is not None and (step % steps_per_epoch == 0 or step == total_steps - 1):
            log(f"step {step}/{total_steps} lr {lr:.5f} loss {loss_value:.4f}")

    model.train(False)
    val_metrics = None
    if val_set:
        counts = ConfusionCounts()
        for p in val_set:
            pred = model.predict_mask(p.bands[None])[0]
            counts = counts + confusion(pred, p.mask)
        val_metrics = metrics(counts)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(steps=total_steps, final_train_loss=loss_value,
                       loss_curve_csv=curve.getvalue(), val_metrics=val_metrics)


def evaluate_patches(model: CloudSegModel, patches: list[Patch],
                     batch_size: int = DESK_BATCH_SIZE) -> tuple[ConfusionCounts, MetricSet]:
    counts = ConfusionCounts()
    for i in range(0, len(patches), batch_size):
        chunk = patches[i:i + batch_size]
        x = np.stack([p.bands for p in chunk])
        preds = model.predict_mask(x)
        for p, pred in zip(chunk, preds):
            counts = counts + confusion(pred, p.mask)
    return counts, metrics(counts)


def evaluate_scenes(model: CloudSegModel, scenes: list[Scene], patch_size: int,
                    batch_size: int = DESK_BATCH_SIZE) -> tuple[ConfusionCounts, MetricSet]:
    counts = ConfusionCounts()
    for scene in scenes:
        pred = predict_scene(model, scene, patch_size, batch_size)
        counts = counts + confusion(pred, scene.mask)
    return counts, metrics(counts)


def predict_scene(model: CloudSegModel, scene: Scene, patch_size: int,
                  batch_size: int = DESK_BATCH_SIZE) -> np.ndarray:
    """Crop -> per-patch inference -> stitched full-scene mask."""
    pset = crop(scene, patch_size)
    preds: list[np.ndarray] = []
    for i in range(0, len(pset.patches), batch_size):
        chunk = pset.patches[i:i + batch_size]
        x = np.stack([p.bands for p in chunk])
        preds.extend(model.predict_mask(x))
    return stitch(pset, preds)


def error_overlay(pred_mask: np.ndarray, target_mask: np.ndarray) -> np.ndarray:
    """RGB byte image: white hits, black background, red false positives,
    green false negatives."""
    p = np.asarray(pred_mask).astype(bool)
    t = np.asarray(target_mask).astype(bool)
    rgb = np.zeros(p.shape + (3,), dtype=np.uint8)
    rgb[p & t] = (255, 255, 255)
    rgb[p & ~t] = (255, 0, 0)
    rgb[~p & t] = (0, 255, 0)
    return rgb
