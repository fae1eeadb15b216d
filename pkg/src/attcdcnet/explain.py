"""Grad-CAM heatmaps and overlay export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import functional as F
from .autograd import GradTape, Tensor
from .data import bilinear_resize, quadrant_bounds
from .errors import ContractError, DataError

OVERLAY_ALPHA = 0.4


@dataclass
class HeatmapResult:
    raw: np.ndarray  # (h, w) at the target layer's resolution, >= 0
    heatmap: np.ndarray  # (H, W) at input resolution, min-max normalized to [0, 1]
    class_index: int
    layer: str
    logits: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.logits))

    @property
    def probabilities(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()


def normalize_heatmap(heat: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant positive map becomes all ones."""
    lo, hi = float(heat.min()), float(heat.max())
    if hi - lo > 1e-12 * max(1.0, abs(hi)):
        return ((heat - lo) / (hi - lo)).astype(np.float32)
    return np.full(heat.shape, 1.0 if hi > 0 else 0.0, dtype=np.float32)


def grad_cam(model, image: Tensor, class_index: int | None = None, layer: str | None = None) -> HeatmapResult:
    """Grad-CAM of ``class_index`` (default: the predicted class) at ``layer``.

    The model must provide ``forward_features(x, capture)``; the default layer
    is the model's ``default_cam_layer``.
    """
    if image.ndim != 4 or image.shape[0] != 1:
        raise ContractError(f"grad_cam expects a single (1, C, H, W) image, got {image.shape}")
    layer = layer or model.default_cam_layer
    if layer not in model.stage_names():
        raise ContractError(f"unknown target layer {layer!r}; choose from {model.stage_names()}")
    model.eval()
    with GradTape() as tape:
        logits, captured = model.forward_features(image, capture=(layer,))
        k = logits.shape[1]
        target = int(np.argmax(logits.data[0]))
        if class_index is not None:
            if not 0 <= class_index < k:
                raise ContractError(f"class index {class_index} outside [0, {k})")
            target = int(class_index)
        score = F.pick(logits, np.array([target]))
    fmap = captured[layer]
    if fmap.ndim != 4:
        raise ContractError(f"layer {layer!r} does not produce a 4-D feature map")
    (grad,) = tape.gradient(score, [fmap])
    model.zero_grad()
    weights = grad[0].mean(axis=(1, 2), dtype=np.float64)
    raw = np.maximum(np.tensordot(weights, fmap.data[0].astype(np.float64), axes=1), 0.0)
    up = bilinear_resize(raw, image.shape[2], image.shape[3])
    return HeatmapResult(raw.astype(np.float32), normalize_heatmap(up), target, layer, logits.data[0].copy())


def quadrant_mass(heatmap: np.ndarray, label: int) -> float:
    """Fraction of the heatmap's total mass inside quadrant ``label``."""
    total = float(heatmap.sum())
    if total <= 0:
        return 0.0
    rows, cols = quadrant_bounds(label, heatmap.shape[0])
    return float(heatmap[rows, cols].sum()) / total


def jet(values: np.ndarray) -> np.ndarray:
    """Fixed piecewise-linear 'jet' colormap: [0, 1] -> RGB in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    centers = np.array([0.75, 0.5, 0.25])  # red, green, blue peaks
    return np.clip(1.5 - np.abs(4.0 * (v - centers)), 0.0, 1.0)


def render_overlay(gray: np.ndarray, heatmap: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """uint8 RGB: the heat colour blended in with per-pixel opacity ``alpha * heat``.

    A zero heatmap reproduces the grayscale input exactly.
    """
    if gray.shape != heatmap.shape:
        raise ContractError(f"image {gray.shape} and heatmap {heatmap.shape} differ in size")
    g = np.clip(gray.astype(np.float64), 0.0, 1.0)[..., None]
    h = np.clip(heatmap.astype(np.float64), 0.0, 1.0)
    a = (alpha * h)[..., None]
    rgb = (1.0 - a) * g + a * jet(h)
    return np.round(rgb * 255.0).astype(np.uint8)


def export_overlay(gray: np.ndarray, heatmap: np.ndarray, path, alpha: float = OVERLAY_ALPHA) -> Path:
    path = Path(path)
    try:
        Image.fromarray(render_overlay(gray, heatmap, alpha)).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write overlay to {path}: {exc}") from None
    return path


def save_heatmap_csv(heatmap: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in heatmap:
            writer.writerow([repr(float(v)) for v in row])
