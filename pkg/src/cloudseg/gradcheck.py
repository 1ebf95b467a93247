"""Finite-difference gradient checking.

The oracle is a central difference (f(x+eps) - f(x-eps)) / (2 eps) evaluated
element by element in float64, fully independent of the backward rules it
verifies. Large tensors are checked on a random subset of elements; small ones
exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, indices: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference d fn / d t.data[indices] (flat indices)."""
    flat = t.data.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn().data)
        flat[i] = orig - eps
        f_minus = float(fn().data)
        flat[i] = orig
        out[k] = (f_plus - f_minus) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-3,
    max_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward() grads and central differences.

    ``fn`` must rebuild the graph from the current ``.data`` of the ``wrt``
    tensors on every call and return a scalar loss.
    """
    rng = rng or np.random.default_rng(0)
    for t in wrt:
        if t.dtype != np.float64:
            raise TypeError("gradient_check requires float64 tensors")
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    for t in wrt:
        t.zero_grad()

    worst = 0.0
    for t, a in zip(wrt, analytic):
        n = t.data.size
        if max_per_tensor is not None and n > max_per_tensor:
            idx = rng.choice(n, size=max_per_tensor, replace=False)
        else:
            idx = np.arange(n)
        num = numeric_gradient(fn, t, idx, eps)
        worst = max(worst, relative_error(a.reshape(-1)[idx], num, floor))
    return worst


def randomize_offsets(module, rng: np.random.Generator, lo: float = 0.05, hi: float = 0.25) -> None:
    """Shift normalisation/bias parameters off zero before checking a block.

    Freshly initialised batchnorm offsets park zero-windows exactly on the
    relu6 kink, where a subgradient and a central difference legitimately
    disagree; random offsets keep preactivations bounded away from kinks.
    """
    for name, p in module.named_parameters():
        if name.rsplit(".", 1)[-1] in ("beta", "bias"):
            signs = np.where(rng.uniform(size=p.data.shape) < 0.5, -1.0, 1.0)
            p.data = p.data + signs * rng.uniform(lo, hi, p.data.shape)


@dataclass
class BlockCheck:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def run_block_suite(seed: int = 0, max_per_tensor: int = 6,
                    model_config=None) -> list[BlockCheck]:
    """Gradient-check every composite block plus a tiny end-to-end model.

    ``model_config`` overrides the built-in gradcheck-scale network for the
    end-to-end check; keep it small, every forward runs in float64.
    """
    from .attention_gate import SkipAttention
    from .backbone import MobileFormerBlock
    from .losses import dice_bce_loss
    from .model import CloudSegModel, ModelConfig
    from .pyramid import FeaturePyramid
    from .tensor import tsum

    rng = np.random.default_rng(seed)
    results: list[BlockCheck] = []

    def weighted(out: Tensor) -> Tensor:
        w = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
        return tsum(out * w)

    def check(name, build_loss, params, tol=1e-4):
        err = gradient_check(build_loss, params, max_per_tensor=max_per_tensor,
                             rng=np.random.default_rng(seed + 1))
        results.append(BlockCheck(name, err, tol))

    # Mobile-Former block
    blk = MobileFormerBlock(4, 6, stride=1, token_dim=8, heads=2, dtype=np.float64, rng=rng)
    blk.train(False)
    randomize_offsets(blk, rng)
    x = Tensor(rng.standard_normal((1, 4, 6, 6)), dtype=np.float64, requires_grad=True)
    z = Tensor(rng.standard_normal((1, 2, 8)), dtype=np.float64, requires_grad=True)
    wy = Tensor(rng.standard_normal((1, 6, 6, 6)), dtype=np.float64)
    wz = Tensor(rng.standard_normal((1, 2, 8)), dtype=np.float64)

    def mf_loss():
        y, zo = blk(x, z)
        return tsum(y * wy) + tsum(zo * wz)

    check("mobile_former_block", mf_loss, [x, z] + [p for _, p in blk.named_parameters()])

    # shared-conv dilated residual block inside the pyramid, and the pyramid itself
    fpm = FeaturePyramid(5, inner=4, out_channels=6, rates=(2, 3, 4), dtype=np.float64, rng=rng)
    fpm.train(False)
    randomize_offsets(fpm, rng)
    xf = Tensor(rng.standard_normal((1, 5, 5, 5)), dtype=np.float64, requires_grad=True)
    wsd = Tensor(rng.standard_normal((1, 4, 5, 5)), dtype=np.float64)
    sd = fpm.sd_blocks[0]
    check("sd_block", lambda: tsum(sd(xf) * wsd), [xf] + [p for _, p in sd.named_parameters()])
    wf = Tensor(rng.standard_normal((1, 6, 5, 5)), dtype=np.float64)
    check("feature_pyramid", lambda: tsum(fpm(xf) * wf), [xf] + [p for _, p in fpm.named_parameters()])

    # skip-connection attention gate (positive inputs keep |x| smooth)
    gate = SkipAttention(6, reduction=2, dtype=np.float64, rng=rng)
    randomize_offsets(gate, rng)
    xg = Tensor(rng.uniform(0.5, 1.5, (1, 6, 5, 5)), dtype=np.float64, requires_grad=True)
    wg = Tensor(rng.standard_normal((1, 6, 5, 5)), dtype=np.float64)
    check("skip_attention", lambda: tsum(gate(xg) * wg), [xg] + [p for _, p in gate.named_parameters()])

    # tiny end-to-end model with the training loss
    cfg = model_config if model_config is not None else ModelConfig.gradcheck_scale()
    model = CloudSegModel(cfg, dtype=np.float64)
    model.train(False)
    randomize_offsets(model, rng)
    size = cfg.deep_stride
    xm = Tensor(rng.standard_normal((1, cfg.bands, size, size)) * 0.5, dtype=np.float64, requires_grad=True)
    target = Tensor((rng.uniform(size=(1, 1, size, size)) > 0.5).astype(np.float64), dtype=np.float64)
    check("full_model", lambda: dice_bce_loss(model(xm), target),
          [xm] + [p for _, p in model.named_parameters()], tol=1e-4)

    return results
