"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every operation used by the network is implemented here on top of numpy
arrays: elementwise math, reductions, matmul, conv2d (stride/dilation/groups),
pooling, bilinear upsampling and the stabilised softmax. Differentiable ops
record a backward closure on the output; ``Tensor.backward`` replays the
recorded graph in reverse topological order, visiting each node once.

float32 is the working precision for training; float64 is used by the
finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible, naming the offending dims."""


class GraphError(RuntimeError):
    """Raised on invalid use of the recorded autodiff graph."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference / profiling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """A numpy-backed array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward_fn", "_op", "_consumed")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"
        self._consumed = False

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- backward --------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor detached from the autodiff graph")
        if self._consumed:
            raise GraphError("backward already ran for this graph; re-run the forward pass")
        self._consumed = True

        # Iterative post-order DFS; graphs are deep enough to overflow recursion.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


def _scalar_err(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def _ensure(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, prev: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = prev
        out._backward_fn = backward_fn
        out._op = op
    else:
        out.requires_grad = False
        out._prev = ()
        out._backward_fn = None
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _ensure(a, b if isinstance(b, Tensor) else None)
    b = _ensure(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _ensure(a, b if isinstance(b, Tensor) else None)
    b = _ensure(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _ensure(a, b if isinstance(b, Tensor) else None)
    b = _ensure(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _ensure(a, b if isinstance(b, Tensor) else None)
    b = _ensure(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = _ensure(a)
    p = float(p)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), (a,), bw, "pow")


def exp(a) -> Tensor:
    a = _ensure(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bw, "log")


def sqrt(a) -> Tensor:
    a = _ensure(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bw, "sqrt")


def absolute(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw, "abs")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _ensure(a)
    out_data = np.clip(a.data, lo, hi)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out_data, (a,), bw, "clamp")


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    # Split by sign so exp never overflows.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def relu6(a) -> Tensor:
    a = _ensure(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * ((a.data > 0) & (a.data < 6)))

    return _make(np.clip(a.data, 0.0, 6.0), (a,), bw, "relu6")


# -- reductions & shape ------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(gk, a.shape).copy())

    return _make(out_data, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            gk = g if keepdims else np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(gk, a.shape) / n)

    return _make(out_data, (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    shape = tuple(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes) -> Tensor:
    a = _ensure(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(start), int(stop))
                t._accumulate(g[tuple(idx)].copy())

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# -- matmul / linear ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """x[..., in] @ w[out, in]^T + b[out]."""
    x = _ensure(x)
    w = _ensure(w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in_features {w.shape[1]}")
    out_data = np.matmul(x.data, w.data.T)
    if b is not None:
        out_data = out_data + b.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data))
        if w.requires_grad:
            gl = g.reshape(-1, g.shape[-1])
            xl = x.data.reshape(-1, x.shape[-1])
            w._accumulate(gl.T @ xl)
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    prev = (x, w) if b is None else (x, w, b)
    return _make(out_data, prev, bw, "linear")


# -- softmax -----------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Stabilised softmax along ``axis``; rejects non-finite inputs."""
    a = _ensure(a)
    m = a.data.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise ShapeError("softmax input contains non-finite values")
    e = exp(sub(a, Tensor(m)))
    return div(e, tsum(e, axis=axis, keepdims=True))


# -- pooling -----------------------------------------------------------------


def lp_pool(a, p: float, axis, keepdims: bool = False) -> Tensor:
    """Generalised mean pooling: (mean |x|^p)^(1/p) over ``axis``.

    p=1 is average pooling of |x|; p -> inf approaches the max of |x|.
    """
    if p < 1:
        raise ValueError(f"lp_pool requires p >= 1, got {p}")
    a = _ensure(a)
    axes = _norm_axes(axis, a.ndim)
    for ax in axes:
        if a.shape[ax] < 1:
            raise ShapeError(f"lp_pool: reduced axis {ax} has extent {a.shape[ax]}")
    if p == 1:
        return tmean(absolute(a), axes, keepdims)
    return power(tmean(power(absolute(a), p), axes, keepdims), 1.0 / p)


def global_avg_pool(a) -> Tensor:
    """NCHW -> NC11 spatial mean."""
    return tmean(a, axis=(2, 3), keepdims=True)


def max_pool2d(a, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel, dims divisible)."""
    a = _ensure(a)
    n, c, h, w = a.shape
    k = kernel
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by kernel {k}")
    oh, ow = h // k, w // k
    win = a.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if a.requires_grad:
            gw = np.zeros_like(win)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            ga = gw.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            a._accumulate(ga)

    return _make(out_data, (a,), bw, "max_pool2d")


# -- convolution -------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, dilation: int = 1, groups: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW weights."""
    x = _ensure(x)
    w = _ensure(w)
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups:
        raise ShapeError(f"conv2d: in_channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: out_channels {cout} not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight in_channels/group {cin_g} != input {cin}//{groups}")
    oh = conv_output_size(h, kh, stride, dilation, padding)
    ow = conv_output_size(wd, kw, stride, dilation, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: degenerate output {oh}x{ow} for input {h}x{wd}, kernel {kh}, "
                         f"stride {stride}, dilation {dilation}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, cin, kh, kw, oh, ow),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    # one batched matmul over (batch, group): [1,G,Og,K] @ [N,G,K,HW] -> [N,G,Og,HW]
    k_size = cin_g * kh * kw
    cols2 = np.ascontiguousarray(cols).reshape(n, groups, k_size, oh * ow)
    wg = w.data.reshape(groups, cout // groups, k_size)
    out_data = np.matmul(wg[None], cols2).reshape(n, cout, oh, ow)
    if b is not None:
        out_data = out_data + b.data.reshape(1, cout, 1, 1)

    def bw(g):
        gg = g.reshape(n, groups, cout // groups, oh * ow)
        if w.requires_grad:
            gw = np.matmul(gg, np.swapaxes(cols2, -1, -2)).sum(axis=0)
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wg, -1, -2)[None], gg)
            gcols = gcols.reshape(n, cin, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dilation: i * dilation + stride * oh: stride,
                        j * dilation: j * dilation + stride * ow: stride] += gcols[:, :, i, j]
            x._accumulate(gxp[:, :, padding: padding + h, padding: padding + wd] if padding else gxp)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    prev = (x, w) if b is None else (x, w, b)
    return _make(out_data, prev, bw, "conv2d")


# -- bilinear upsampling -----------------------------------------------------


def _up2_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis with half-pixel-centre bilinear interpolation."""
    x = np.moveaxis(arr, axis, -1)
    left = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    right = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.25 * left + 0.75 * x
    out[..., 1::2] = 0.75 * x + 0.25 * right
    return np.moveaxis(out, -1, axis)


def _up2_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of :func:`_up2_axis` (scatter the output grad back)."""
    gm = np.moveaxis(g, axis, -1)
    ge = gm[..., 0::2]
    go = gm[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]       # left-edge clamp
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]     # right-edge clamp
    return np.moveaxis(gx, -1, axis)


def bilinear_upsample2x(a) -> Tensor:
    """Double H and W of an NCHW map, interpolating between pixel centres."""
    a = _ensure(a)
    if a.ndim != 4:
        raise ShapeError(f"bilinear_upsample2x expects NCHW, got shape {a.shape}")
    out_data = _up2_axis(_up2_axis(a.data, 2), 3)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_up2_axis_grad(_up2_axis_grad(g, 3), 2))

    return _make(out_data, (a,), bw, "bilinear_upsample2x")
