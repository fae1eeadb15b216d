"""Adam optimizer, epoch loop, evaluation and checkpoint resume."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .autograd import GradTape, Tensor, backward
from .checkpoint import Checkpoint, load_model_state, model_state, save_checkpoint
from .data import AugmentConfig, ImageSource, augment, batch_slices
from .errors import CheckpointMismatchError, ConfigurationError, ContractError, NumericalError
from .losses import FocalLossConfig, inverse_frequency_alpha, make_loss
from .metrics import MetricsReport, compute_metrics

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "precision", "recall", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    """Defaults follow experiment 1: batch 64, lr 1e-3, 20 epochs, Adam."""

    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 20
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "focal"
    focal_gamma: float = 2.0
    # scalar weight, or "inverse_frequency" for per-class weights from the train split
    focal_alpha: float | str = 1.0
    seed: int = 0
    augment: bool = False
    record_wall_time: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer != "adam":
            raise ConfigurationError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.loss not in ("focal", "cross_entropy"):
            raise ConfigurationError(f"loss must be 'focal' or 'cross_entropy', got {self.loss!r}")
        if isinstance(self.focal_alpha, str) and self.focal_alpha != "inverse_frequency":
            raise ConfigurationError(f"unknown focal_alpha {self.focal_alpha!r}")

    @classmethod
    def experiment(cls, number: int, **overrides) -> "TrainConfig":
        """Table of the two reported runs: 1 = (64, 1e-3, 20), 2 = (128, 1e-3, 100)."""
        presets = {1: dict(batch_size=64, epochs=20), 2: dict(batch_size=128, epochs=100)}
        if number not in presets:
            raise ConfigurationError("experiment must be 1 or 2")
        return cls(**{**presets[number], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    precision: float
    recall: float
    seconds: float = 0.0

    def row(self) -> list[str]:
        return [str(self.epoch), self.split] + [repr(float(v)) for v in
                (self.loss, self.accuracy, self.precision, self.recall, self.seconds)]

    def to_dict(self) -> dict:
        return asdict(self)


class CsvMetricsSink:
    """Appends one CSV row per (epoch, split) record, flushing after each."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._writer.writerow(METRICS_HEADER)
            self._fh.flush()

    def __call__(self, record: EpochRecord) -> None:
        self._writer.writerow(record.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------- Adam


@dataclass
class AdamMoments:
    m: list[np.ndarray]
    v: list[np.ndarray]


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    moments: AdamMoments,
    t: int,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``moments``.

    A ``None`` gradient leaves that parameter and its moments untouched.
    """
    if t < 1:
        raise ContractError(f"Adam step index must be >= 1, got {t}")
    if not (len(params) == len(grads) == len(moments.m) == len(moments.v)):
        raise ContractError("params, grads and moments must have equal length")
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.t = 0
        self.moments = AdamMoments(
            [np.zeros_like(p.data) for p in self.params],
            [np.zeros_like(p.data) for p in self.params],
        )

    def step(self) -> None:
        self.t += 1
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.moments, self.t, self.config)

    def state(self, names: Sequence[str]) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(names, self.moments.m, self.moments.v):
            out[f"adam.m/{name}"] = m
            out[f"adam.v/{name}"] = v
        return out

    def load_state(self, names: Sequence[str], tensors: dict[str, np.ndarray], t: int) -> None:
        for i, name in enumerate(names):
            for key, store in (("m", self.moments.m), ("v", self.moments.v)):
                arr = tensors.get(f"adam.{key}/{name}")
                if arr is None or arr.shape != store[i].shape:
                    raise CheckpointMismatchError(f"optimizer moment adam.{key}/{name} missing or misshapen")
                store[i][...] = arr
        self.t = t


# ---------------------------------------------------------------- loops


def _predict_logits(model, source: ImageSource, batch_size: int) -> np.ndarray:
    model.eval()
    out = []
    for x, _ in source.batches(batch_size):
        out.append(model(Tensor(x)).data)
    return np.concatenate(out)


def evaluate(
    model,
    source: ImageSource,
    loss_fn: Callable | str = "cross_entropy",
    batch_size: int = 64,
    epoch: int = 0,
    split: str = "val",
) -> tuple[EpochRecord, MetricsReport]:
    """Eval-mode forward pass over ``source``; no tape, no state changes."""
    if len(source) == 0:
        raise ContractError("cannot evaluate an empty split")
    if isinstance(loss_fn, str):
        loss_fn = make_loss(loss_fn)
    start = time.perf_counter()
    logits = _predict_logits(model, source, batch_size)
    loss = loss_fn(Tensor(logits), source.labels).item()
    report = compute_metrics(logits.argmax(axis=1), source.labels, logits.shape[1])
    record = EpochRecord(epoch, split, loss, report.accuracy, report.precision, report.recall,
                         time.perf_counter() - start)
    return record, report


@dataclass
class FitResult:
    model: object
    records: list[EpochRecord]
    optimizer: Adam
    best_val_accuracy: float = -1.0
    best_epoch: int = 0
    checkpoints: dict[str, Path] = field(default_factory=dict)


def resolve_loss(config: TrainConfig, train_labels: np.ndarray, num_classes: int):
    if config.loss == "cross_entropy":
        return make_loss("cross_entropy")
    alpha = config.focal_alpha
    if alpha == "inverse_frequency":
        alpha = inverse_frequency_alpha(train_labels, num_classes)
    return make_loss("focal", FocalLossConfig(config.focal_gamma, alpha))


def make_checkpoint(model, optimizer: Adam, epoch: int, records, config: TrainConfig, extra=None) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    tensors = model_state(model)
    tensors.update(optimizer.state(names))
    meta = {
        "model_config": model.config.to_dict(),
        "train_config": config.to_dict(),
        "epoch": epoch,
        "adam_step": optimizer.t,
        "seed": config.seed,
        "records": [r.to_dict() for r in records],
    }
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def restore_training_state(model, optimizer: Adam, ckpt: Checkpoint) -> list[EpochRecord]:
    load_model_state(model, ckpt.tensors)
    optimizer.load_state([n for n, _ in model.named_parameters()], ckpt.tensors, int(ckpt.meta.get("adam_step", 0)))
    return [EpochRecord(**r) for r in ckpt.meta.get("records", [])]


def fit(
    model,
    train: ImageSource,
    val: ImageSource,
    config: TrainConfig,
    sinks: Iterable[Callable[[EpochRecord], None]] = (),
    checkpoint_dir=None,
    resume: Checkpoint | None = None,
    extra_meta: dict | None = None,
) -> FitResult:
    """Train for ``config.epochs`` epochs, evaluating on ``val`` after each.

    Shuffling uses a generator seeded from ``(config.seed, epoch)`` so a run
    resumed from a checkpoint replays exactly the batches of an uninterrupted
    run.  ``last.ckpt`` is written every epoch and ``best.ckpt`` whenever the
    validation accuracy improves.
    """
    if len(train) == 0 or len(val) == 0:
        raise ContractError("fit needs non-empty train and val splits")
    sinks = list(sinks)
    num_classes = model.config.num_classes
    loss_fn = resolve_loss(config, train.labels, num_classes)
    optimizer = Adam(model.parameters(), config)
    records: list[EpochRecord] = []
    start_epoch = 0
    best_acc, best_epoch = -1.0, 0
    if resume is not None:
        records = restore_training_state(model, optimizer, resume)
        start_epoch = resume.epoch
        best_acc = float(resume.meta.get("best_val_accuracy", -1.0))
        best_epoch = int(resume.meta.get("best_epoch", 0))
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    result = FitResult(model, records, optimizer, best_acc, best_epoch)
    augment_cfg = AugmentConfig(enabled=config.augment)

    for epoch in range(start_epoch + 1, config.epochs + 1):
        started = time.perf_counter()
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        total_loss, preds, truths = 0.0, [], []
        for b, chunk in enumerate(batch_slices(len(order), config.batch_size)):
            x, y = train.get(order[chunk])
            x = augment(x, augment_cfg, seed=[config.seed, epoch, b])
            model.zero_grad()
            with GradTape() as tape:
                logits = model(Tensor(x))
                loss = loss_fn(logits, y)
            value = loss.item()
            if not np.isfinite(value) or not np.all(np.isfinite(logits.data)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch index {b}")
            backward(tape, loss)
            optimizer.step()
            total_loss += value * len(y)
            preds.append(logits.data.argmax(axis=1))
            truths.append(y)
        train_report = compute_metrics(np.concatenate(preds), np.concatenate(truths), num_classes)
        train_seconds = time.perf_counter() - started
        train_rec = EpochRecord(
            epoch, "train", total_loss / len(train), train_report.accuracy, train_report.precision,
            train_report.recall, train_seconds if config.record_wall_time else 0.0,
        )
        val_rec, _ = evaluate(model, val, loss_fn, config.batch_size, epoch, "val")
        if not config.record_wall_time:
            val_rec.seconds = 0.0
        for rec in (train_rec, val_rec):
            records.append(rec)
            for sink in sinks:
                sink(rec)
        logger.info(
            "epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f",
            epoch, train_rec.loss, train_rec.accuracy, val_rec.loss, val_rec.accuracy,
        )
        improved = val_rec.accuracy > result.best_val_accuracy
        if improved:
            result.best_val_accuracy, result.best_epoch = val_rec.accuracy, epoch
        if ckpt_dir:
            meta = dict(extra_meta or {}, best_val_accuracy=result.best_val_accuracy, best_epoch=result.best_epoch)
            ckpt = make_checkpoint(model, optimizer, epoch, records, config, meta)
            save_checkpoint(ckpt_dir / "last.ckpt", ckpt)
            result.checkpoints["last"] = ckpt_dir / "last.ckpt"
            if improved:
                save_checkpoint(ckpt_dir / "best.ckpt", ckpt)
                result.checkpoints["best"] = ckpt_dir / "best.ckpt"
    return result
