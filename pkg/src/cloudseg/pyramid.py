"""Feature pyramid over the deepest encoder map.

Five parallel paths: a global-average-pooling path, a pointwise path, and
three dilated residual blocks that reuse one literally shared 3x3
convolution. The dilated outputs are fused progressively (each rate summed
onto the previous) before concatenation, which suppresses the checkerboard
sampling artifact of stacked dilations without adding parameters.
"""

from __future__ import annotations

import numpy as np

from .layers import ConvBnAct, Conv2d, Module
from .tensor import ShapeError, Tensor, concat, global_avg_pool, relu6


class SharedDilatedBlock(Module):
    """Pointwise reduce -> shared 3x3 conv -> dilated 3x3 conv, residual.

    ``shared_conv`` is one instance reused by every block; it is registered
    on the pyramid (not here) so its weights are counted once. The dilated
    stage adds onto its own input, and the block output adds back the
    post-reduction tensor.
    """

    def __init__(self, in_channels, inner, rate, shared_conv: ConvBnAct,
                 dtype=np.float32, rng=None):
        super().__init__()
        self.reduce = ConvBnAct(in_channels, inner, 1, dtype=dtype, rng=rng)
        self.dilated = ConvBnAct(inner, inner, 3, dilation=rate, dtype=dtype, rng=rng)
        self.rate = rate
        self._shared = shared_conv  # owned (and counted) by the pyramid

    def forward(self, x):
        t = self.reduce(x)
        u = self._shared(t)
        v = u + self.dilated(u)
        return v + t


class FeaturePyramid(Module):
    """Multi-rate context module producing ``out_channels`` at input stride."""

    def __init__(self, in_channels, inner, out_channels, rates=(6, 12, 18),
                 dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if list(rates) != sorted(set(rates)) or min(rates) < 1:
            raise ShapeError(f"dilation rates must be strictly increasing and >= 1, got {rates}")
        self.inner = inner
        self.out_channels = out_channels
        self.rates = tuple(rates)
        # Global path keeps no batchnorm: batch stats over a 1x1 map are degenerate.
        self.gap_proj = Conv2d(in_channels, inner, 1, bias=True, dtype=dtype, rng=rng)
        self.pointwise = ConvBnAct(in_channels, inner, 1, dtype=dtype, rng=rng)
        self.shared_conv = ConvBnAct(inner, inner, 3, dtype=dtype, rng=rng)
        self.sd_blocks = [SharedDilatedBlock(in_channels, inner, r, self.shared_conv,
                                             dtype=dtype, rng=rng) for r in self.rates]
        self.fuse = ConvBnAct(len(self.rates) * inner + 2 * inner, out_channels, 1,
                              dtype=dtype, rng=rng)

    def forward(self, x):
        n, c, h, w = x.shape
        if h < 1 or w < 1:
            raise ShapeError(f"pyramid input degenerate: {x.shape}")
        pooled = relu6(self.gap_proj(global_avg_pool(x)))
        ones = Tensor(np.ones((1, 1, h, w), dtype=pooled.dtype))
        gap_path = pooled * ones  # broadcast back over the spatial grid
        pw_path = self.pointwise(x)
        dilated = [blk(x) for blk in self.sd_blocks]
        fused = [dilated[0]]
        for d in dilated[1:]:
            fused.append(fused[-1] + d)  # progressive sum, no parameters
        return self.fuse(concat([gap_path, pw_path] + fused, axis=1))


class PointwiseNeck(Module):
    """Drop-in replacement for the pyramid: a single pointwise unit."""

    def __init__(self, in_channels, out_channels, dtype=np.float32, rng=None):
        super().__init__()
        self.unit = ConvBnAct(in_channels, out_channels, 1, dtype=dtype, rng=rng)

    def forward(self, x):
        return self.unit(x)
