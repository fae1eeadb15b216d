"""Parameterized layers built from the primitives in :mod:`attcdcnet.functional`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .autograd import Tensor
from .errors import ConfigurationError, DimensionError

Shape = tuple[int, ...]


@dataclass(frozen=True)
class SummaryRow:
    name: str
    out_shape: Shape
    params: int
    macs_standard: int = 0
    macs_separable: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "out_shape": list(self.out_shape),
            "params": self.params,
            "macs_standard": self.macs_standard,
            "macs_separable": self.macs_separable,
        }


def standard_macs(m: int, n: int, dk: int, dp_h: int, dp_w: int | None = None) -> int:
    """N * Dp^2 * Dk^2 * M multiply-accumulates of a standard convolution."""
    dp_w = dp_h if dp_w is None else dp_w
    return n * dp_h * dp_w * dk * dk * m


def separable_macs(m: int, n: int, dk: int, dp_h: int, dp_w: int | None = None) -> int:
    """M * Dp^2 * (Dk^2 + N) multiply-accumulates of depthwise + pointwise."""
    dp_w = dp_h if dp_w is None else dp_w
    return m * dp_h * dp_w * (dk * dk + n)


def kaiming(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Minimal container tracking parameters, buffers and sub-modules in order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def describe(self, in_shape: Shape, name: str) -> tuple[list[SummaryRow], Shape]:
        """Summary rows and output shape for an input of ``in_shape`` (C, H, W)."""
        raise NotImplementedError


def _check_channels(x: Tensor, expected: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise DimensionError(f"{who} expects {expected} input channels, got shape {x.shape}")


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        exact: bool = True,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.exact = kernel_size, stride, padding, exact
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(kaiming(rng, shape, fan_in), requires_grad=True)

    def forward(self, x):
        _check_channels(x, self.in_channels, "Conv2d")
        return F.conv2d(x, self.weight, self.stride, self.padding, self.exact)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return F.output_size(h, k, s, p, self.exact), F.output_size(w, k, s, p, self.exact)

    def describe(self, in_shape, name):
        hp, wp = self.out_hw(*in_shape[1:])
        m, n, k = self.in_channels, self.out_channels, self.kernel_size
        macs = standard_macs(m, n, k, hp, wp)
        # only 3x3 dense-layer sites are candidates for substitution
        sep = separable_macs(m, n, k, hp, wp) if getattr(self, "separable_site", False) else macs
        out = (n, hp, wp)
        return [SummaryRow(name, out, self.num_parameters(), macs, sep)], out


class DepthwiseSeparableConv2d(Module):
    """Depthwise Dk x Dk convolution followed by a pointwise 1x1 convolution."""

    separable_site = True

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 1,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        k = kernel_size
        self.depthwise = Tensor(kaiming(rng, (in_channels, 1, k, k), k * k), requires_grad=True)
        self.pointwise = Tensor(
            kaiming(rng, (out_channels, in_channels, 1, 1), in_channels), requires_grad=True
        )

    def forward(self, x):
        _check_channels(x, self.in_channels, "DepthwiseSeparableConv2d")
        y = F.depthwise_conv2d(x, self.depthwise, self.stride, self.padding)
        return F.pointwise_conv2d(y, self.pointwise)

    def describe(self, in_shape, name):
        k, s, p = self.kernel_size, self.stride, self.padding
        hp, wp = F.output_size(in_shape[1], k, s, p), F.output_size(in_shape[2], k, s, p)
        m, n = self.in_channels, self.out_channels
        out = (n, hp, wp)
        row = SummaryRow(
            name, out, self.num_parameters(), standard_macs(m, n, k, hp, wp), separable_macs(m, n, k, hp, wp)
        )
        return [row], out


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        _check_channels(x, self.channels, "BatchNorm2d")
        return F.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )

    def describe(self, in_shape, name):
        return [SummaryRow(name, tuple(in_shape), self.num_parameters())], tuple(in_shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(kaiming(rng, (out_features, in_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def describe(self, in_shape, name):
        return [SummaryRow(name, (self.out_features,), self.num_parameters())], (self.out_features,)


class AttentionBlock(Module):
    """Channel attention: GAP -> FC -> activation -> FC -> sigmoid -> rescale.

    ``force_scores`` pins every attention score to a constant, which turns the
    block into a fixed channel scaling (1.0 makes it a pass-through).
    """

    def __init__(
        self,
        channels: int,
        reduction: int = 16,
        activation: str = "relu",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"attention channels {channels} must be divisible by reduction ratio {reduction}"
            )
        if activation not in ("relu", "sigmoid", "identity"):
            raise ConfigurationError(f"unknown attention activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.channels, self.reduction, self.activation = channels, reduction, activation
        hidden = channels // reduction
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.force_scores: float | None = None
        self.last_scores: np.ndarray | None = None

    def scores(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "AttentionBlock")
        if self.force_scores is not None:
            return Tensor(np.full(x.shape[:2], self.force_scores))
        h = self.fc1(F.global_avg_pool(x))
        if self.activation == "relu":
            h = F.relu(h)
        elif self.activation == "sigmoid":
            h = F.sigmoid(h)
        return F.sigmoid(self.fc2(h))

    def forward(self, x):
        s = self.scores(x)
        self.last_scores = s.data
        return F.broadcast_mul(x, s)

    def describe(self, in_shape, name):
        return [SummaryRow(name, tuple(in_shape), self.num_parameters())], tuple(in_shape)


class DenseLayer(Module):
    """BN-ReLU-Conv1x1-BN-ReLU-Conv3x3 body whose output is concatenated to the input."""

    def __init__(
        self,
        in_channels: int,
        growth_rate: int = 32,
        bn_size: int = 4,
        separable: bool = False,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        inner = bn_size * growth_rate
        self.in_channels, self.growth_rate, self.separable = in_channels, growth_rate, separable
        self.norm1 = BatchNorm2d(in_channels)
        self.conv1 = Conv2d(in_channels, inner, 1, rng=rng)
        self.norm2 = BatchNorm2d(inner)
        if separable:
            self.conv2 = DepthwiseSeparableConv2d(inner, growth_rate, 3, 1, 1, rng=rng)
        else:
            self.conv2 = Conv2d(inner, growth_rate, 3, 1, 1, rng=rng)
            self.conv2.separable_site = True

    def body(self, x: Tensor) -> Tensor:
        h = self.conv1(F.relu(self.norm1(x)))
        return self.conv2(F.relu(self.norm2(h)))

    def forward(self, x):
        _check_channels(x, self.in_channels, "DenseLayer")
        return F.channel_concat([x, self.body(x)])

    def describe(self, in_shape, name):
        rows, shape = [], tuple(in_shape)
        for part in ("norm1", "conv1", "norm2", "conv2"):
            r, shape = getattr(self, part).describe(shape, f"{name}.{part}")
            rows += r
        return rows, (in_shape[0] + self.growth_rate,) + tuple(in_shape[1:])


class DenseBlock(Module):
    def __init__(
        self,
        num_layers: int,
        in_channels: int,
        growth_rate: int = 32,
        bn_size: int = 4,
        separable: bool = False,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = in_channels + num_layers * growth_rate
        self.layers = []
        for i in range(num_layers):
            layer = DenseLayer(in_channels + i * growth_rate, growth_rate, bn_size, separable, rng)
            setattr(self, f"denselayer{i + 1}", layer)
            self.layers.append(layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def describe(self, in_shape, name):
        rows, shape = [], tuple(in_shape)
        for i, layer in enumerate(self.layers):
            r, shape = layer.describe(shape, f"{name}.denselayer{i + 1}")
            rows += r
        return rows, shape


class Transition(Module):
    """BN-ReLU-Conv1x1 (channel compression) then 2x2 average pooling."""

    def __init__(self, in_channels: int, compression: float = 0.5, rng: np.random.Generator | None = None):
        super().__init__()
        out_channels = int(np.floor(compression * in_channels))
        if out_channels < 1:
            raise ConfigurationError(f"compression {compression} leaves no channels from {in_channels}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.norm = BatchNorm2d(in_channels)
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng)

    def forward(self, x):
        if x.ndim == 4 and min(x.shape[2:]) < 2:
            raise DimensionError(f"Transition needs H, W >= 2, got {x.shape[2:]}")
        return F.avg_pool2d(self.conv(F.relu(self.norm(x))), 2, 2)

    def describe(self, in_shape, name):
        if min(in_shape[1:]) < 2:
            raise DimensionError(f"{name}: transition needs H, W >= 2, got {tuple(in_shape[1:])}")
        rows, shape = self.norm.describe(in_shape, f"{name}.norm")
        r, shape = self.conv.describe(shape, f"{name}.conv")
        rows += r
        out = (shape[0], shape[1] // 2, shape[2] // 2)
        rows.append(SummaryRow(f"{name}.pool", out, 0))
        return rows, out


def layer_param_count(layer: Module) -> int:
    """Exact number of trainable scalars; running statistics are excluded."""
    return layer.num_parameters()
