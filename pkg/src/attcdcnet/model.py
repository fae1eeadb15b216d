"""DenseNet121 and its attention / depthwise-separable variant (AttCDCNet)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .autograd import Tensor
from .errors import ConfigurationError, DimensionError
from .layers import (
    AttentionBlock,
    BatchNorm2d,
    Conv2d,
    DenseBlock,
    Linear,
    Module,
    SummaryRow,
    Transition,
)

CONV_MODES = ("standard", "depthwise_separable")
MIN_INPUT_SIZE = 32


@dataclass(frozen=True)
class ModelConfig:
    block_layout: tuple[int, ...] = (6, 12, 24, 16)
    growth_rate: int = 32
    bn_size: int = 4
    compression: float = 0.5
    stem_channels: int = 64
    num_classes: int = 4
    conv_mode: str = "standard"
    # which dense blocks get separable 3x3 convs; None means all of them
    separable_blocks: tuple[int, ...] | None = None
    attention: bool = False
    attention_reduction: int = 16
    attention_activation: str = "relu"
    input_channels: int = 3
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "block_layout", tuple(int(b) for b in self.block_layout))
        if self.separable_blocks is not None:
            object.__setattr__(self, "separable_blocks", tuple(int(b) for b in self.separable_blocks))
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigurationError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        if not self.block_layout or any(b < 1 for b in self.block_layout):
            raise ConfigurationError(f"block_layout must be non-empty positive ints: {self.block_layout}")
        if self.growth_rate < 1 or self.bn_size < 1 or self.stem_channels < 1 or self.input_channels < 1:
            raise ConfigurationError("growth_rate, bn_size, stem_channels, input_channels must be >= 1")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigurationError(f"compression must lie in (0, 1], got {self.compression}")
        if self.attention_reduction < 1:
            raise ConfigurationError("attention_reduction must be >= 1")
        if self.input_size < MIN_INPUT_SIZE:
            raise ConfigurationError(f"input_size must be >= {MIN_INPUT_SIZE}, got {self.input_size}")
        if self.separable_blocks is not None:
            bad = [b for b in self.separable_blocks if not 1 <= b <= len(self.block_layout)]
            if bad:
                raise ConfigurationError(f"separable_blocks out of range: {bad}")

    @classmethod
    def baseline(cls, num_classes: int = 4, **overrides) -> "ModelConfig":
        """Unmodified DenseNet121."""
        return cls(num_classes=num_classes, **overrides)

    @classmethod
    def enhanced(cls, num_classes: int = 4, **overrides) -> "ModelConfig":
        """DenseNet121 with post-block attention and separable 3x3 convolutions."""
        opts = {"conv_mode": "depthwise_separable", "attention": True}
        opts.update(overrides)
        return cls(num_classes=num_classes, **opts)

    def block_is_separable(self, index: int) -> bool:
        if self.conv_mode != "depthwise_separable":
            return False
        return self.separable_blocks is None or index in self.separable_blocks

    def block_channels(self) -> list[int]:
        """Output channel count of every dense block."""
        out, channels = [], self.stem_channels
        for i, n in enumerate(self.block_layout):
            channels += n * self.growth_rate
            out.append(channels)
            if i < len(self.block_layout) - 1:
                channels = int(np.floor(self.compression * channels))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layout"] = list(self.block_layout)
        if self.separable_blocks is not None:
            d["separable_blocks"] = list(self.separable_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["block_layout"] = tuple(d["block_layout"])
        if d.get("separable_blocks") is not None:
            d["separable_blocks"] = tuple(d["separable_blocks"])
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class AttCDCNet(Module):
    """Stem, four dense blocks with transitions, optional attention, linear head.

    With ``attention=False`` and ``conv_mode="standard"`` this is exactly
    DenseNet121 (6,957,956 trainable scalars for 3-channel input, 4 classes).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.conv0 = Conv2d(c.input_channels, c.stem_channels, 7, stride=2, padding=3, exact=False, rng=rng)
        self.norm0 = BatchNorm2d(c.stem_channels)
        self.stages: list[tuple[str, Module]] = [("conv0", self.conv0), ("norm0", self.norm0)]
        channels = c.stem_channels
        n_blocks = len(c.block_layout)
        for i, n_layers in enumerate(c.block_layout, start=1):
            block = DenseBlock(n_layers, channels, c.growth_rate, c.bn_size, c.block_is_separable(i), rng)
            self._add(f"denseblock{i}", block)
            channels = block.out_channels
            if c.attention:
                self._add(
                    f"attention{i}",
                    AttentionBlock(channels, c.attention_reduction, c.attention_activation, rng),
                )
            if i < n_blocks:
                trans = Transition(channels, c.compression, rng)
                self._add(f"transition{i}", trans)
                channels = trans.out_channels
        self.norm5 = BatchNorm2d(channels)
        self.classifier = Linear(channels, c.num_classes, rng)
        self.feature_channels = channels

    def _add(self, name: str, module: Module) -> None:
        setattr(self, name, module)
        self.stages.append((name, module))

    @property
    def attention_blocks(self) -> list[AttentionBlock]:
        return [m for _, m in self.stages if isinstance(m, AttentionBlock)]

    @property
    def default_cam_layer(self) -> str:
        """Output of the final dense block, after its attention block if present."""
        last = len(self.config.block_layout)
        return f"attention{last}" if self.config.attention else f"denseblock{last}"

    def stage_names(self) -> list[str]:
        return [name for name, _ in self.stages]

    def check_input(self, shape: tuple[int, ...]) -> None:
        """Validate an (N, C, H, W) batch shape against the pooling cascade."""
        if len(shape) != 4:
            raise DimensionError(f"expected a (N, C, H, W) batch, got shape {shape}")
        if shape[1] != self.config.input_channels:
            raise DimensionError(f"model expects {self.config.input_channels} channels, got {shape[1]}")
        h, w = shape[2:]
        if min(h, w) < MIN_INPUT_SIZE:
            raise DimensionError(f"input {h}x{w} is smaller than the minimum {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
        self._propagate((shape[1], h, w))

    def _propagate(self, in_shape) -> tuple[list[SummaryRow], tuple[int, ...]]:
        rows, shape = [], tuple(in_shape)
        try:
            for name, module in self.stages:
                r, shape = module.describe(shape, name)
                rows += r
                if name == "norm0":
                    shape = (
                        shape[0],
                        F.output_size(shape[1], 3, 2, 1, exact=False),
                        F.output_size(shape[2], 3, 2, 1, exact=False),
                    )
                    rows.append(SummaryRow("pool0", shape, 0))
        except DimensionError as exc:
            raise DimensionError(f"input too small at stage '{name}': {exc}") from None
        r, shape = self.norm5.describe(shape, "norm5")
        rows += r
        rows.append(SummaryRow("pool5", (shape[0],), 0))
        r, shape = self.classifier.describe((shape[0],), "classifier")
        rows += r
        return rows, shape

    def forward(self, x: Tensor, capture: tuple[str, ...] = ()) -> Tensor:
        logits, _ = self.forward_features(x, capture)
        return logits

    def forward_features(self, x: Tensor, capture=()) -> tuple[Tensor, dict[str, Tensor]]:
        """Logits plus the output tensors of the stages named in ``capture``."""
        self.check_input(x.shape)
        unknown = set(capture) - set(self.stage_names())
        if unknown:
            raise ConfigurationError(f"unknown layer(s) {sorted(unknown)}; choose from {self.stage_names()}")
        captured = {}
        for name, module in self.stages:
            x = module(x)
            if name == "norm0":
                x = F.max_pool2d(F.relu(x), 3, 2, 1)
            if name in capture:
                captured[name] = x
        x = F.relu(self.norm5(x))
        logits = self.classifier(F.global_avg_pool(x))
        return logits, captured


def build_model(config: ModelConfig, seed: int = 0) -> AttCDCNet:
    return AttCDCNet(config, seed=seed)


def forward_classify(model: AttCDCNet, batch: Tensor, mode: str = "eval") -> Tensor:
    """Logits of shape (N, num_classes); ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(batch)


def count_parameters(model: Module) -> int:
    return model.num_parameters()


@dataclass
class ModelSummary:
    rows: list[SummaryRow]
    total_params: int
    total_macs_standard: int
    total_macs_separable: int
    input_shape: tuple[int, ...] = field(default=())

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.rows], indent=2)

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'layer':<{width}}  {'output shape':<16} {'params':>10} {'MACs (std)':>14} {'MACs (sep)':>14}"]
        lines.append("-" * len(lines[0]))
        for r in self.rows:
            shape = "x".join(str(d) for d in r.out_shape)
            lines.append(f"{r.name:<{width}}  {shape:<16} {r.params:>10,} {r.macs_standard:>14,} {r.macs_separable:>14,}")
        lines.append("-" * len(lines[0]))
        lines.append(f"total parameters: {self.total_params:,}")
        lines.append(f"total MACs (standard 3x3): {self.total_macs_standard:,}")
        lines.append(f"total MACs (separable 3x3): {self.total_macs_separable:,}")
        return "\n".join(lines)


def summarize(model: AttCDCNet, input_size: int | None = None) -> ModelSummary:
    size = input_size or model.config.input_size
    in_shape = (model.config.input_channels, size, size)
    rows, _ = model._propagate(in_shape)
    return ModelSummary(
        rows=rows,
        total_params=sum(r.params for r in rows),
        total_macs_standard=sum(r.macs_standard for r in rows),
        total_macs_separable=sum(r.macs_separable for r in rows),
        input_shape=in_shape,
    )


@dataclass(frozen=True)
class ConvSite:
    name: str
    m: int
    n: int
    dk: int
    dp: tuple[int, int]
    macs_standard: int
    macs_separable: int

    @property
    def ratio(self) -> float:
        return self.macs_separable / self.macs_standard


@dataclass
class ComplexityReport:
    sites: list[ConvSite]
    total_standard: int
    total_separable: int

    @property
    def ratio(self) -> float:
        return self.total_separable / self.total_standard

    def to_dict(self) -> dict:
        return {
            "sites": [
                {"name": s.name, "M": s.m, "N": s.n, "Dk": s.dk, "Dp": list(s.dp),
                 "macs_standard": s.macs_standard, "macs_separable": s.macs_separable}
                for s in self.sites
            ],
            "total_standard": self.total_standard,
            "total_separable": self.total_separable,
            "ratio": self.ratio,
        }


def complexity_report(model: AttCDCNet, input_size: int | None = None) -> ComplexityReport:
    """MACs of every 3x3 dense-layer site under both convolution modes."""
    summary = summarize(model, input_size)
    sites = []
    for row in summary.rows:
        if not row.name.endswith(".conv2"):
            continue
        module = _resolve(model, row.name)
        sites.append(
            ConvSite(row.name, module.in_channels, module.out_channels, module.kernel_size,
                     row.out_shape[1:], row.macs_standard, row.macs_separable)
        )
    return ComplexityReport(
        sites,
        sum(s.macs_standard for s in sites),
        sum(s.macs_separable for s in sites),
    )


def _resolve(model: Module, dotted: str) -> Module:
    obj = model
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj
