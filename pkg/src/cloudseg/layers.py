"""Parameterised layers composing the tensor primitives.

Layers register their parameters on attribute assignment (torch-style) so a
model exposes uniquely named weights via dotted paths. Each compute layer
reports its multiply-accumulate count to the active cost tracker during a
forward pass; normalisation, activations and pooling count zero MACs.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import profiler
from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    linear,
    matmul,
    relu6,
    softmax,
    sqrt,
    tmean,
    transpose,
)


class Parameter(Tensor):
    """A trainable tensor (counted by the profiler, updated by the optimizer)."""

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)


def kaiming_conv(rng: np.random.Generator, shape, dtype) -> Parameter:
    fan_in = int(np.prod(shape[1:]))
    return Parameter(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), dtype=dtype)


def normal_init(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> Parameter:
    return Parameter(rng.standard_normal(shape) * std, dtype=dtype)


class Module:
    """Base class: child/parameter discovery, train/eval mode, cost hooks."""

    _buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        # underscore attributes are references, not owned submodules
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def own_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for path, module in self.named_modules(prefix):
            for name, p in module.own_parameters():
                yield (f"{path}.{name}" if path else name), p

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, module in self.named_modules(prefix):
            for name in module._buffer_names:
                yield (f"{path}.{name}" if path else name), getattr(module, name)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Identity(Module):
    def forward(self, x):
        return x


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self.steps = list(modules)

    def forward(self, x):
        for m in self.steps:
            x = m(x)
        return x


class Conv2d(Module):
    """Cross-correlation layer; padding=None means size-preserving "same"."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, dilation=1,
                 groups=1, padding=None, bias=False, dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding = padding
        self.weight = kaiming_conv(rng, (out_channels, in_channels // groups, kernel, kernel), dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype) if bias else None

    def forward(self, x):
        out = conv2d(x, self.weight, self.bias, stride=self.stride,
                     dilation=self.dilation, groups=self.groups, padding=self.padding)
        n, _, oh, ow = out.shape
        profiler.record_macs(self, n * oh * ow * self.out_channels
                             * (self.in_channels // self.groups) * self.kernel * self.kernel)
        return out


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, dtype=np.float32, rng=None, std=0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = normal_init(rng, (out_features, in_features), dtype, std)
        self.bias = Parameter(np.zeros(out_features), dtype=dtype) if bias else None

    def forward(self, x):
        out = linear(x, self.weight, self.bias)
        profiler.record_macs(self, (x.size // x.shape[-1]) * self.in_features * self.out_features)
        return out


class BatchNorm2d(Module):
    """Per-channel normalisation; running stats use the biased batch variance."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects N,{self.channels},H,W input, got {x.shape}")
        if self.training:
            mu = tmean(x, axis=(0, 2, 3), keepdims=True)
            var = tmean((x - mu) * (x - mu), axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            xhat = (x - mu) / sqrt(var + self.eps)
        else:
            mu = Tensor(self.running_mean.reshape(1, -1, 1, 1))
            var = Tensor(self.running_var.reshape(1, -1, 1, 1))
            xhat = (x - mu) / sqrt(var + self.eps)
        g = self.gamma.reshape(1, self.channels, 1, 1)
        b = self.beta.reshape(1, self.channels, 1, 1)
        return xhat * g + b


class LayerNorm(Module):
    """Normalises the last axis (token feature dimension)."""

    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Parameter(np.ones(dim), dtype=dtype)
        self.beta = Parameter(np.zeros(dim), dtype=dtype)

    def forward(self, x):
        mu = tmean(x, axis=-1, keepdims=True)
        var = tmean((x - mu) * (x - mu), axis=-1, keepdims=True)
        return (x - mu) / sqrt(var + self.eps) * self.gamma + self.beta


class ConvBnAct(Module):
    """conv -> batchnorm -> relu6, the standard unit of the conv branches."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, dilation=1,
                 groups=1, act=True, dtype=np.float32, rng=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride=stride,
                           dilation=dilation, groups=groups, dtype=dtype, rng=rng)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self.act = act

    def forward(self, x):
        x = self.bn(self.conv(x))
        return relu6(x) if self.act else x


class DepthwiseSeparable(Module):
    """Depthwise 3x3 then pointwise 1x1, each with batchnorm + relu6."""

    def __init__(self, in_channels, out_channels, stride=1, dtype=np.float32, rng=None):
        super().__init__()
        self.depthwise = ConvBnAct(in_channels, in_channels, 3, stride=stride,
                                   groups=in_channels, dtype=dtype, rng=rng)
        self.pointwise = ConvBnAct(in_channels, out_channels, 1, dtype=dtype, rng=rng)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over token sequences.

    With ``project_kv=False`` the keys and values are the raw second input
    (the cheap cross-attention variant); queries are then projected into the
    key/value width so the dot products line up.
    """

    def __init__(self, q_dim, kv_dim=None, heads=1, project_kv=True, out_proj=True,
                 dtype=np.float32, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        kv_dim = q_dim if kv_dim is None else kv_dim
        inner = q_dim if project_kv else kv_dim
        if inner % heads:
            raise ShapeError(f"attention width {inner} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = inner // heads
        self.inner = inner
        self.q_proj = Linear(q_dim, inner, dtype=dtype, rng=rng)
        if project_kv:
            self.k_proj = Linear(kv_dim, inner, dtype=dtype, rng=rng)
            self.v_proj = Linear(kv_dim, inner, dtype=dtype, rng=rng)
        else:
            self.k_proj = None
            self.v_proj = None
        self.out_proj = Linear(inner, q_dim, dtype=dtype, rng=rng) if out_proj else None

    def _split(self, t):
        b, n, _ = t.shape
        return transpose(t.reshape(b, n, self.heads, self.head_dim), (0, 2, 1, 3))

    def forward(self, q, kv, return_weights=False):
        b, nq, _ = q.shape
        nk = kv.shape[1]
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(kv)) if self.k_proj else self._split(kv)
        vh = self._split(self.v_proj(kv)) if self.v_proj else kh
        scale = 1.0 / np.sqrt(self.head_dim)
        scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * scale
        weights = softmax(scores, axis=-1)
        out = matmul(weights, vh)
        profiler.record_macs(self, 2 * b * self.heads * nq * nk * self.head_dim)
        out = transpose(out, (0, 2, 1, 3)).reshape(b, nq, self.inner)
        if self.out_proj is not None:
            out = self.out_proj(out)
        return (out, weights) if return_weights else out
