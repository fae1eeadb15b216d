"""scikit-learn compatible classifier around :class:`AttCDCNet`.

``X`` is a stack of grayscale images, shape ``(n, H, W)`` with values in
``[0, 1]``, or an already standardized ``(n, C, H, W)`` tensor.  Labels may be
any hashable values; they are encoded in sorted order as ``classes_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted

from .autograd import Tensor
from .data import DEFAULT_MEAN, DEFAULT_STD, ImageSource, preprocess
from .errors import ConfigurationError, DimensionError
from .model import ModelConfig, build_model
from .training import TrainConfig, fit


class AttCDCNetClassifier(ClassifierMixin, BaseEstimator):
    """Train and apply the classifier with the usual ``fit`` / ``predict`` API.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`.
    ``input_size=None`` keeps the native image size (which must be square).
    A stratified ``validation_fraction`` of the training data is held out
    for per-epoch validation; ``history_`` holds the epoch records.
    """

    def __init__(
        self,
        variant: str = "enhanced",
        epochs: int = 20,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        loss: str = "focal",
        focal_gamma: float = 2.0,
        focal_alpha=1.0,
        attention_reduction: int = 16,
        conv_mode: str | None = None,
        input_size: int | None = None,
        validation_fraction: float = 0.1,
        random_state: int = 0,
    ):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.loss = loss
        self.focal_gamma = focal_gamma
        self.focal_alpha = focal_alpha
        self.attention_reduction = attention_reduction
        self.conv_mode = conv_mode
        self.input_size = input_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _prepare(self, X, size: int | None) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
        if X.ndim == 3:
            size = size or X.shape[1]
            if size != X.shape[2] and self.input_size is None:
                raise DimensionError(f"images must be square when input_size is None, got {X.shape[1:]}")
            return np.stack([preprocess(img, size, DEFAULT_MEAN, DEFAULT_STD) for img in X])
        if X.ndim == 4:
            if X.shape[1] != 3:
                raise DimensionError(f"(n, C, H, W) input needs C == 3, got {X.shape}")
            return X
        raise DimensionError(f"expected (n, H, W) or (n, 3, H, W) images, got shape {X.shape}")

    def _model_config(self, num_classes: int, size: int) -> ModelConfig:
        if self.variant == "baseline":
            return ModelConfig.baseline(num_classes, conv_mode=self.conv_mode or "standard", input_size=size)
        if self.variant == "enhanced":
            return ModelConfig.enhanced(
                num_classes, conv_mode=self.conv_mode or "depthwise_separable",
                attention_reduction=self.attention_reduction, input_size=size,
            )
        raise ConfigurationError(f"variant must be 'enhanced' or 'baseline', got {self.variant!r}")

    def fit(self, X, y):
        y = np.asarray(y)
        if y.ndim != 1:
            raise ValueError(f"y must be one-dimensional, got shape {y.shape}")
        X = self._prepare(X, self.input_size)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        codes = self._encoder.transform(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.input_size_ = X.shape[-1]
        train_idx, val_idx = train_test_split(
            np.arange(len(y)), test_size=self.validation_fraction, stratify=codes,
            random_state=self.random_state,
        )
        train = ImageSource.from_arrays(X[train_idx], codes[train_idx])
        val = ImageSource.from_arrays(X[val_idx], codes[val_idx])
        config = TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate, epochs=self.epochs,
            loss="cross_entropy" if self.loss in ("ce", "cross_entropy") else self.loss,
            focal_gamma=self.focal_gamma, focal_alpha=self.focal_alpha, seed=self.random_state,
        )
        self.model_ = build_model(self._model_config(len(self.classes_), self.input_size_), seed=self.random_state)
        result = fit(self.model_, train, val, config)
        self.history_ = [r.to_dict() for r in result.records]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._prepare(X, self.input_size_)
        if X.shape[-1] != self.input_size_:
            raise DimensionError(f"model was fitted on {self.input_size_}px inputs, got {X.shape[-1]}px")
        self.model_.eval()
        out = [self.model_(Tensor(X[i : i + self.batch_size])).data for i in range(0, len(X), self.batch_size)]
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
