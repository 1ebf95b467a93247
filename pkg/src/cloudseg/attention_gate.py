"""Channel-then-spatial attention gate for the skip connections.

Channel gate: the map is pooled over space twice (generalised mean with p=1
and p=2), both descriptors pass through one shared bottleneck MLP, the
results are summed and squashed. Spatial gate: the channel-gated map is
pooled across channels the same way, the two single-channel maps are
concatenated and a 3x3 convolution produces the per-pixel gate.
"""

from __future__ import annotations

import numpy as np

from .layers import Conv2d, Linear, Module
from .tensor import concat, lp_pool, relu6, sigmoid


class ChannelGate(Module):
    def __init__(self, channels, reduction=8, pool_ps=(1.0, 2.0), dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        hidden = max(1, channels // reduction)
        self.pool_ps = tuple(pool_ps)
        self.fc_in = Linear(channels, hidden, dtype=dtype, rng=rng)
        self.fc_out = Linear(hidden, channels, dtype=dtype, rng=rng)

    def forward(self, x):
        n, c, _, _ = x.shape
        summed = None
        for p in self.pool_ps:
            desc = lp_pool(x, p=p, axis=(2, 3))          # N, C
            out = self.fc_out(relu6(self.fc_in(desc)))
            summed = out if summed is None else summed + out
        return sigmoid(summed).reshape(n, c, 1, 1)


class SpatialGate(Module):
    def __init__(self, pool_ps=(1.0, 2.0), dtype=np.float32, rng=None):
        super().__init__()
        self.pool_ps = tuple(pool_ps)
        self.conv = Conv2d(len(self.pool_ps), 1, 3, bias=True, dtype=dtype, rng=rng)

    def forward(self, x):
        maps = [lp_pool(x, p=p, axis=1, keepdims=True) for p in self.pool_ps]  # N,1,H,W each
        return sigmoid(self.conv(concat(maps, axis=1)))


class SkipAttention(Module):
    """Cascade: channel gate first, spatial gate on the channel-gated map."""

    def __init__(self, channels, reduction=8, pool_ps=(1.0, 2.0), dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channel = ChannelGate(channels, reduction, pool_ps, dtype=dtype, rng=rng)
        self.spatial = SpatialGate(pool_ps, dtype=dtype, rng=rng)

    def forward(self, x):
        y = x * self.channel(x)
        return y * self.spatial(y)
