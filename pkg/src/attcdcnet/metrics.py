"""Confusion-matrix metrics: accuracy, macro precision and macro recall."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows are true classes, columns predictions
    accuracy: float
    precision: float
    recall: float
    per_class_precision: list[float]
    per_class_recall: list[float]

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "confusion": self.confusion.astype(int).reshape(-1).tolist(),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "per_class_precision": self.per_class_precision,
            "per_class_recall": self.per_class_recall,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        k = d["num_classes"]
        return cls(
            confusion=np.asarray(d["confusion"], dtype=np.int64).reshape(k, k),
            accuracy=d["accuracy"],
            precision=d["precision"],
            recall=d["recall"],
            per_class_precision=list(d["per_class_precision"]),
            per_class_recall=list(d["per_class_recall"]),
        )


def confusion_matrix(predictions, truths, num_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    truths = np.asarray(truths, dtype=np.int64).reshape(-1)
    if predictions.shape != truths.shape:
        raise ContractError(f"{predictions.size} predictions vs {truths.size} truths")
    if predictions.size == 0:
        raise ContractError("metrics need at least one sample")
    both = np.concatenate([predictions, truths])
    if both.min() < 0 or both.max() >= num_classes:
        raise ContractError(f"class indices must lie in [0, {num_classes})")
    flat = np.bincount(truths * num_classes + predictions, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(predictions, truths, num_classes: int) -> MetricsReport:
    """Per-class precision is 0 for a class that is never predicted."""
    cm = confusion_matrix(predictions, truths, num_classes)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_ratio(tp, cm.sum(axis=0))
    recall = _safe_ratio(tp, cm.sum(axis=1))
    return MetricsReport(
        confusion=cm,
        accuracy=float(tp.sum() / cm.sum()),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        per_class_precision=precision.tolist(),
        per_class_recall=recall.tolist(),
    )
