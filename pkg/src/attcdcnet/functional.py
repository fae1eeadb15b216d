"""Differentiable primitives.

Images use the (batch, channels, height, width) layout.  Every function
takes and returns :class:`~attcdcnet.autograd.Tensor` objects and records a
vector-Jacobian product on the active tape when an input needs a gradient.

Means and variances accumulate in float64.  Convolution and linear layers
use the float32 BLAS GEMM (see the README's numerics note).
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, as_tensor, make_result
from .errors import ConfigurationError, ContractError, DimensionError


class MacCounter:
    """Accumulates multiply-accumulate counts of executed convolutions."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(op: str, macs: int) -> None:
    for counter in _counters:
        counter.add(op, int(macs))


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def output_size(size: int, kernel: int, stride: int, padding: int, exact: bool = True) -> int:
    """Spatial output size of a sliding window.

    With ``exact`` the window must tile the padded input with no remainder;
    otherwise floor semantics apply (as the DenseNet stem requires).
    """
    if stride < 1 or padding < 0 or kernel < 1:
        raise ConfigurationError(
            f"invalid window: kernel={kernel}, stride={stride}, padding={padding}"
        )
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(
            f"window of size {kernel} does not fit input of size {size} with padding {padding}"
        )
    if exact and span % stride:
        raise ConfigurationError(
            f"(size {size} + 2*{padding} - {kernel}) / stride {stride} is not an integer"
        )
    return span // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if not padding:
        return x
    width = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    return np.pad(x, width, mode="constant", constant_values=value)


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    return x[:, :, padding:-padding, padding:-padding]


def _windows(xp: np.ndarray, k: int, stride: int, hp: int, wp: int) -> np.ndarray:
    """View of shape (N, C, Hp, Wp, k, k)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (hp - 1) * stride + 1 : stride, : (wp - 1) * stride + 1 : stride]


def _scatter_windows(dwin: np.ndarray, shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window gradients back onto the input."""
    n, c, hp, wp = dwin.shape[:4]
    out = np.zeros(shape, dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (hp - 1) * stride + 1 : stride, j : j + (wp - 1) * stride + 1 : stride] += dwin[
                :, :, :, :, i, j
            ]
    return out


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, exact: bool = True) -> Tensor:
    """Standard (bias-free) 2-D convolution, computed as an im2col GEMM."""
    _require_4d(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d kernel must be (N_out, M, Dk, Dk), got {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, k, _ = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d kernel has {kc} input channels but input has {c}")
    hp = output_size(h, k, stride, padding, exact)
    wp = output_size(w, k, stride, padding, exact)
    xp = _pad(x.data, padding)
    if k == 1 and stride == 1:
        cols = xp.transpose(0, 2, 3, 1).reshape(n * hp * wp, c)
    else:
        cols = _windows(xp, k, stride, hp, wp).transpose(0, 2, 3, 1, 4, 5).reshape(n * hp * wp, c * k * k)
    wmat = kernel.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, hp, wp, o).transpose(0, 3, 1, 2)
    _tally("conv2d", n * o * hp * wp * c * k * k)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * hp * wp, o)
        dk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = gm @ wmat
            if k == 1 and stride == 1:
                dxp = dcols.reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            else:
                dwin = dcols.reshape(n, hp, wp, c, k, k).transpose(0, 3, 1, 2, 4, 5)
                dxp = _scatter_windows(dwin, xp.shape, k, stride)
            dx = np.ascontiguousarray(_unpad(dxp, padding))
        return dx, dk

    return make_result("conv2d", out, (x, kernel), vjp)


def pointwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """1x1 convolution mixing channels at every pixel."""
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
        raise DimensionError(f"pointwise kernel must be (N_out, M, 1, 1), got {kernel.shape}")
    return conv2d(x, kernel, stride=1, padding=0)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, exact: bool = True) -> Tensor:
    """One Dk x Dk filter per input channel; no cross-channel mixing."""
    _require_4d(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[1] != 1 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"depthwise kernel must be (M, 1, Dk, Dk), got {kernel.shape}")
    if kernel.shape[0] != c:
        raise DimensionError(f"depthwise kernel has {kernel.shape[0]} filters but input has {c} channels")
    k = kernel.shape[2]
    hp = output_size(h, k, stride, padding, exact)
    wp = output_size(w, k, stride, padding, exact)
    xp = _pad(x.data, padding)
    kd = kernel.data[:, 0]
    span_h, span_w = (hp - 1) * stride + 1, (wp - 1) * stride + 1

    out = np.zeros((n, c, hp, wp), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + span_h : stride, j : j + span_w : stride] * kd[None, :, i, j, None, None]
    _tally("depthwise_conv2d", n * c * hp * wp * k * k)

    def vjp(g):
        dk = dxp = None
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
                    dk[:, 0, i, j] = np.einsum("nchw,nchw->c", patch, g)
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += g * kd[None, :, i, j, None, None]
            dxp = np.ascontiguousarray(_unpad(dxp, padding))
        return dxp, dk

    return make_result("depthwise_conv2d", out, (x, kernel), vjp)


# ---------------------------------------------------------------- pooling


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64)

    def vjp(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.data.dtype),)

    return make_result("global_avg_pool", out, (x,), vjp)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Average pooling without padding; floor semantics on the output size."""
    _require_4d(x, "avg_pool2d")
    n, c, h, w = x.shape
    hp = output_size(h, kernel, stride, 0, exact=False)
    wp = output_size(w, kernel, stride, 0, exact=False)
    win = _windows(x.data, kernel, stride, hp, wp)
    out = win.mean(axis=(4, 5), dtype=np.float64)

    def vjp(g):
        dwin = np.broadcast_to((g / (kernel * kernel))[..., None, None], g.shape + (kernel, kernel))
        return (_scatter_windows(dwin, x.shape, kernel, stride).astype(x.data.dtype),)

    return make_result("avg_pool2d", out, (x,), vjp)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 0) -> Tensor:
    """Max pooling with -inf padding and floor semantics."""
    _require_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    hp = output_size(h, kernel, stride, padding, exact=False)
    wp = output_size(w, kernel, stride, padding, exact=False)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, stride, hp, wp).reshape(n, c, hp, wp, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros((n, c, hp, wp, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dwin = dwin.reshape(n, c, hp, wp, kernel, kernel)
        return (np.ascontiguousarray(_unpad(_scatter_windows(dwin, xp.shape, kernel, stride), padding)),)

    return make_result("max_pool2d", out, (x,), vjp)


# ---------------------------------------------------------------- normalization


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate).  In eval mode the running statistics are used.
    """
    _require_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d affine params must have shape ({c},)")
    count = n * h * w
    dtype = x.data.dtype
    if training:
        if count < 2:
            raise ContractError("batchnorm2d in train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = x.data - mean.astype(dtype)[None, :, None, None]
        var = np.einsum("nchw,nchw->c", centered, centered, dtype=np.float64) / count
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = x.data - mean.astype(dtype)[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.astype(dtype)[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g):
        sum_g = g.sum(axis=(0, 2, 3), dtype=np.float64)
        sum_gx = np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64)
        dgamma = sum_gx.astype(dtype) if gamma.requires_grad else None
        dbeta = sum_g.astype(dtype) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            scale = (gamma.data.astype(np.float64) * inv_std).astype(dtype)[None, :, None, None]
            if training:
                mg = (sum_g / count).astype(dtype)[None, :, None, None]
                mgx = (sum_gx / count).astype(dtype)[None, :, None, None]
                dx = scale * (g - mg - xhat * mgx)
            else:
                dx = g * scale
        return dx, dgamma, dbeta

    return make_result("batchnorm2d", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return make_result("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive value")
    return make_result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def neg(x: Tensor) -> Tensor:
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent``; exponent 0 gives ones with zero gradient."""
    exponent = float(exponent)
    if exponent == 0.0:
        return make_result("pow", np.ones_like(x.data), (x,), lambda g: (np.zeros_like(g),))
    out = x.data**exponent

    def vjp(g):
        if exponent == 1.0:
            return (g,)
        return (g * exponent * x.data ** (exponent - 1.0),)

    return make_result("pow", out, (x,), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        da = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        db = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return da, db

    return make_result("mul", out, (a, b), vjp)


def broadcast_mul(x: Tensor, scores: Tensor) -> Tensor:
    """Scale each (n, c) feature map of ``x`` by ``scores[n, c]``."""
    _require_4d(x, "broadcast_mul")
    if scores.shape != x.shape[:2]:
        raise DimensionError(f"scores shape {scores.shape} does not match feature map {x.shape[:2]}")
    s = scores.data[:, :, None, None]
    out = x.data * s

    def vjp(g):
        dx = g * s if x.requires_grad else None
        ds = np.einsum("nchw,nchw->nc", g, x.data) if scores.requires_grad else None
        return dx, ds

    return make_result("broadcast_mul", out, (x, scores), vjp)


# ---------------------------------------------------------------- structure


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("channel_concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"channel_concat: shape {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(
            g[:, bounds[i] : bounds[i + 1]] if t.requires_grad else None for i, t in enumerate(tensors)
        )

    return make_result("channel_concat", out, tensors, vjp)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_result("channel_slice", x.data[:, start:stop], (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out_features, in_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return make_result("linear", out, inputs, vjp)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.array([x.data.sum(dtype=np.float64)])
    return make_result("sum", out, (x,), lambda g: (np.full_like(x.data, g.reshape(-1)[0]),))


def mean(x: Tensor) -> Tensor:
    out = np.array([x.data.mean(dtype=np.float64)])
    return make_result("mean", out, (x,), lambda g: (np.full_like(x.data, g.reshape(-1)[0] / x.size),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_result("softmax", out, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last dimension."""
    d = x.data.astype(np.float64)
    shifted = d - d.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        g64 = g.astype(np.float64)
        return ((g64 - probs * g64.sum(axis=-1, keepdims=True)).astype(x.data.dtype),)

    return make_result("log_softmax", out, (x,), vjp)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[n, index[n]]`` from a (N, K) tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick: expected (N, K) input and (N,) index, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return make_result("pick", out, (x,), vjp)
