"""Hybrid CNN-Transformer encoder.

A strided 3x3 stem is followed by stages of blocks that run a convolutional
bottleneck and a small set of global tokens in parallel, exchanging
information both ways through cheap cross-attention: token queries attend
over raw feature pixels on the way in, and feature-pixel queries attend over
projected tokens on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import profiler
from .layers import ConvBnAct, Linear, Module, MultiHeadAttention, normal_init
from .tensor import ShapeError, Tensor, matmul, relu6, softmax, transpose


@dataclass
class BackboneOutput:
    """Multi-resolution feature taps (keyed by output stride) plus tokens."""

    features: dict[int, Tensor]
    tokens: Tensor


def _flatten_pixels(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return transpose(x.reshape(n, c, h * w), (0, 2, 1))  # N, HW, C


class Stem(Module):
    """3x3 stride-2 convolution adjusting band count to the first width."""

    def __init__(self, bands, out_channels, dtype=np.float32, rng=None):
        super().__init__()
        self.unit = ConvBnAct(bands, out_channels, 3, stride=2, dtype=dtype, rng=rng)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"stem needs even spatial dims, got {x.shape}; pad the input upstream")
        return self.unit(x)


class TokensToFeatures(Module):
    """Cross attention gating tokens into the feature map.

    Feature-pixel queries are used raw; only the tokens are projected (keys
    and values), and the value projection doubles as the output projection,
    so the attended result adds straight onto the feature map.
    """

    def __init__(self, channels, token_dim, heads, dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if channels % heads:
            raise ShapeError(f"feature width {channels} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = channels // heads
        self.channels = channels
        self.k_proj = Linear(token_dim, channels, dtype=dtype, rng=rng)
        self.v_proj = Linear(token_dim, channels, dtype=dtype, rng=rng)

    def forward(self, x, tokens):
        n, c, h, w = x.shape
        m = tokens.shape[1]
        q = _flatten_pixels(x)
        k = self.k_proj(tokens)
        v = self.v_proj(tokens)

        def split(t, length):
            return transpose(t.reshape(n, length, self.heads, self.head_dim), (0, 2, 1, 3))

        qh, kh, vh = split(q, h * w), split(k, m), split(v, m)
        scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1)
        out = matmul(weights, vh)
        profiler.record_macs(self, 2 * n * self.heads * (h * w) * m * self.head_dim)
        out = transpose(out, (0, 2, 1, 3)).reshape(n, h * w, c)
        out = transpose(out, (0, 2, 1)).reshape(n, c, h, w)
        return x + out


class TransformerLayer(Module):
    """Pre-norm self-attention + feed-forward over the token sequence."""

    def __init__(self, dim, heads, ffn_expansion=2, dtype=np.float32, rng=None):
        super().__init__()
        from .layers import LayerNorm
        rng = rng or np.random.default_rng(0)
        self.attn_norm = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads=heads, dtype=dtype, rng=rng)
        self.ffn_norm = LayerNorm(dim, dtype=dtype)
        hidden = dim * ffn_expansion
        self.ffn_in = Linear(dim, hidden, dtype=dtype, rng=rng)
        self.ffn_out = Linear(hidden, dim, dtype=dtype, rng=rng)

    def forward(self, z):
        h = self.attn_norm(z)
        z = z + self.attn(h, h)
        h = relu6(self.ffn_in(self.ffn_norm(z)))
        return z + self.ffn_out(h)


class InvertedBottleneck(Module):
    """Pointwise expand -> depthwise 3x3 (block stride) -> pointwise project.

    Residual connection when the block keeps stride and width, the usual
    bottleneck convention.
    """

    def __init__(self, in_channels, out_channels, stride=1, expansion=3, dtype=np.float32, rng=None):
        super().__init__()
        hidden = in_channels * expansion
        self.expand = ConvBnAct(in_channels, hidden, 1, dtype=dtype, rng=rng)
        self.depthwise = ConvBnAct(hidden, hidden, 3, stride=stride, groups=hidden, dtype=dtype, rng=rng)
        self.project = ConvBnAct(hidden, out_channels, 1, act=False, dtype=dtype, rng=rng)
        self.residual = stride == 1 and in_channels == out_channels

    def forward(self, x):
        out = self.project(self.depthwise(self.expand(x)))
        return x + out if self.residual else out


class MobileFormerBlock(Module):
    """One encoder block: features and tokens updated in parallel.

    Order per step: (1) tokens attend over the incoming feature pixels,
    (2) token self-attention + FFN, (3) convolutional bottleneck on the
    features, (4) updated tokens gated back onto the outgoing features.
    """

    def __init__(self, in_channels, out_channels, stride, token_dim, heads,
                 ffn_expansion=2, mobile_expansion=3, dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.features_to_tokens = MultiHeadAttention(
            token_dim, kv_dim=in_channels, heads=heads, project_kv=False, dtype=dtype, rng=rng)
        self.former = TransformerLayer(token_dim, heads, ffn_expansion, dtype=dtype, rng=rng)
        self.mobile = InvertedBottleneck(in_channels, out_channels, stride, mobile_expansion,
                                         dtype=dtype, rng=rng)
        self.tokens_to_features = TokensToFeatures(out_channels, token_dim, heads, dtype=dtype, rng=rng)

    def forward(self, x, tokens):
        tokens = tokens + self.features_to_tokens(tokens, _flatten_pixels(x))
        tokens = self.former(tokens)
        y = self.mobile(x)
        y = self.tokens_to_features(y, tokens)
        return y, tokens


class Encoder(Module):
    """Stem plus stages of blocks; every stage opens with a stride-2 block.

    Produces feature taps after the stem and after each stage, keyed by
    output stride (2, 4, ... up to 2^(1+stages)), and the final tokens.
    """

    def __init__(self, bands, stem_channels, stage_channels, stage_blocks,
                 token_count, token_dim, heads, ffn_expansion=2, mobile_expansion=3,
                 dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if len(stage_channels) != len(stage_blocks):
            raise ShapeError("stage_channels and stage_blocks lengths differ")
        self.token_count = token_count
        self.token_dim = token_dim
        self.tokens = normal_init(rng, (token_count, token_dim), dtype, std=0.02)
        self.stem = Stem(bands, stem_channels, dtype=dtype, rng=rng)
        self.blocks: list[MobileFormerBlock] = []
        self._stage_sizes = list(stage_blocks)
        ch = stem_channels
        for width, blocks in zip(stage_channels, stage_blocks):
            for b in range(blocks):
                self.blocks.append(MobileFormerBlock(
                    ch, width, stride=2 if b == 0 else 1, token_dim=token_dim, heads=heads,
                    ffn_expansion=ffn_expansion, mobile_expansion=mobile_expansion,
                    dtype=dtype, rng=rng))
                ch = width
        self.deep_stride = 2 ** (1 + len(stage_channels))

    def forward(self, x) -> BackboneOutput:
        divisor = self.deep_stride
        if x.shape[2] % divisor or x.shape[3] % divisor:
            raise ShapeError(f"encoder input spatial dims must be divisible by {divisor}, "
                             f"got {x.shape}; pad the input upstream")
        n = x.shape[0]
        z = self.tokens.reshape(1, self.token_count, self.token_dim)
        z = z + Tensor(np.zeros((n, 1, 1), dtype=self.tokens.dtype))  # broadcast across batch
        feats: dict[int, Tensor] = {}
        y = self.stem(x)
        stride = 2
        feats[stride] = y
        i = 0
        for size in self._stage_sizes:
            for block in self.blocks[i:i + size]:
                y, z = block(y, z)
            i += size
            stride *= 2
            feats[stride] = y
        return BackboneOutput(features=feats, tokens=z)
