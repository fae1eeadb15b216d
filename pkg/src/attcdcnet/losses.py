"""Cross-entropy and focal loss over logits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor
from .errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class FocalLossConfig:
    """Focusing exponent ``gamma`` and class weights ``alpha`` (scalar or per class)."""

    gamma: float = 2.0
    alpha: float | tuple[float, ...] = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigurationError(f"focal gamma must be >= 0, got {self.gamma}")
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if np.any(alpha <= 0):
            raise ConfigurationError("focal alpha values must be > 0")
        if alpha.size > 1:
            object.__setattr__(self, "alpha", tuple(float(a) for a in alpha))

    def alpha_for(self, targets: np.ndarray, num_classes: int) -> np.ndarray:
        if isinstance(self.alpha, tuple):
            if len(self.alpha) != num_classes:
                raise ConfigurationError(
                    f"alpha has {len(self.alpha)} entries but there are {num_classes} classes"
                )
            return np.asarray(self.alpha)[targets]
        return np.full(targets.shape, float(self.alpha))


def inverse_frequency_alpha(labels: Sequence[int], num_classes: int) -> tuple[float, ...]:
    """Per-class weights proportional to 1/frequency, normalized to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    if np.any(counts == 0):
        raise ConfigurationError("every class needs at least one sample to derive alpha")
    inv = 1.0 / counts
    return tuple(float(a) for a in inv * num_classes / inv.sum())


def _check_targets(logits: Tensor, targets) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ContractError(f"logits must be (N, K), got shape {logits.shape}")
    if targets.size == 0:
        raise ContractError("loss of an empty batch is undefined")
    if targets.shape[0] != logits.shape[0]:
        raise ContractError(f"{targets.shape[0]} targets for {logits.shape[0]} logit rows")
    k = logits.shape[1]
    if targets.min() < 0 or targets.max() >= k:
        raise ContractError(f"targets must lie in [0, {k})")
    return targets


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target]."""
    targets = _check_targets(logits, targets)
    return F.neg(F.mean(F.pick(F.log_softmax(logits), targets)))


def focal_loss(logits: Tensor, targets, config: FocalLossConfig | None = None) -> Tensor:
    """Mean of -alpha[y] * (1 - p_y)**gamma * log(p_y) with p = softmax(logits)."""
    config = config or FocalLossConfig()
    targets = _check_targets(logits, targets)
    log_p = F.pick(F.log_softmax(logits), targets)
    modulator = F.pow_scalar(1.0 - F.exp(log_p), config.gamma)
    alpha = Tensor(config.alpha_for(targets, logits.shape[1]))
    return F.neg(F.mean(modulator * log_p * alpha))


def make_loss(name: str, focal: FocalLossConfig | None = None):
    """Loss callable ``(logits, targets) -> Tensor`` by name (``focal`` or ``cross_entropy``)."""
    if name in ("focal", "focal_loss"):
        cfg = focal or FocalLossConfig()
        return lambda logits, targets: focal_loss(logits, targets, cfg)
    if name in ("ce", "cross_entropy"):
        return cross_entropy
    raise ConfigurationError(f"unknown loss {name!r}; expected 'focal' or 'cross_entropy'")
