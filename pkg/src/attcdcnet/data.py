"""Image-folder datasets, stratified splitting, batch loading and synthetic data.

Dataset layout on disk is ``<root>/<ClassName>/*.png|jpg``; class indices
follow the sorted class-directory names.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autograd import Tensor
from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
DEFAULT_MEAN = 0.5
DEFAULT_STD = 0.25

# Kaggle COVID-19 Radiography folder names, already in sorted order
RADIOGRAPHY_CLASSES = ("COVID", "Lung_Opacity", "Normal", "Viral Pneumonia")
RADIOGRAPHY_COUNTS = (3716, 6012, 10192, 1345)


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the dataset root, forward slashes
    label: int
    class_name: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path | None = None
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def validate(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be unique")
        for e in self.entries:
            if not 0 <= e.label < self.num_classes:
                raise DataError(f"label {e.label} of {e.path} out of range")
        missing = [n for n, c in zip(self.class_names, self.class_counts()) if c == 0]
        if missing:
            raise DataError(f"classes without samples: {missing}")

    def absolute(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label_index", "class_name"])
            for e in self.entries:
                writer.writerow([e.path, e.label, e.class_name])

    @classmethod
    def read_csv(cls, path, root=None) -> "DatasetManifest":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"manifest {path} is empty")
        entries = [ManifestEntry(r["path"], int(r["label_index"]), r["class_name"]) for r in rows]
        names: dict[int, str] = {}
        for e in entries:
            names.setdefault(e.label, e.class_name)
        class_names = [names.get(i, f"class_{i}") for i in range(max(names) + 1)]
        manifest = cls(entries, class_names, Path(root) if root else Path(path).parent)
        manifest.validate()
        return manifest


def scan_image_folder(root) -> DatasetManifest:
    """Deterministic manifest of ``root``: classes and files sorted by name.

    Files whose header cannot be read are skipped and listed in
    ``manifest.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    entries, warnings = [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        kept = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    im.size
            except (OSError, UnidentifiedImageError) as exc:
                warnings.append(f"skipped unreadable file {f}: {exc}")
                logger.warning("skipping unreadable image %s", f)
                continue
            entries.append(ManifestEntry(f.relative_to(root).as_posix(), label, cdir.name))
            kept += 1
        if kept == 0:
            raise DataError(f"class directory '{cdir.name}' contains no readable images")
    return DatasetManifest(entries, [d.name for d in class_dirs], root, warnings)


# ---------------------------------------------------------------- splitting


@dataclass
class SplitAssignment:
    assignment: list[str]  # one of SPLITS per manifest entry, in manifest order
    seed: int
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.assignment) if s == split], dtype=np.int64)

    def sizes(self) -> dict[str, int]:
        return {s: int(sum(a == s for a in self.assignment)) for s in SPLITS}

    def write_csv(self, path, manifest: DatasetManifest) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "split"])
            for e, s in zip(manifest.entries, self.assignment):
                writer.writerow([e.path, s])

    @classmethod
    def read_csv(cls, path, manifest: DatasetManifest, seed: int = -1) -> "SplitAssignment":
        with open(path, newline="", encoding="utf-8") as fh:
            by_path = {r["path"]: r["split"] for r in csv.DictReader(fh)}
        try:
            assignment = [by_path[e.path] for e in manifest.entries]
        except KeyError as exc:
            raise DataError(f"split file {path} has no entry for {exc.args[0]}") from None
        bad = set(assignment) - set(SPLITS)
        if bad:
            raise DataError(f"split file {path} has unknown split names {sorted(bad)}")
        return cls(assignment, seed)


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer sizes summing to ``n`` that are within one of ``n * fraction``."""
    quotas = [n * f for f in fractions]
    # snap quotas that are integers up to rounding noise (0.7 * 100 etc.)
    quotas = [round(q) if abs(q - round(q)) < 1e-9 else q for q in quotas]
    sizes = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(
    manifest: DatasetManifest, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0
) -> SplitAssignment:
    """Per-class seeded shuffle followed by a contiguous train/val/test cut."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    labels = manifest.labels
    assignment = [""] * len(manifest)
    too_small = []
    for label in range(manifest.num_classes):
        members = np.flatnonzero(labels == label)
        sizes = largest_remainder(len(members), fractions)
        if min(sizes) == 0:
            too_small.append(f"{manifest.class_names[label]} ({len(members)} samples)")
            continue
        members = members[rng.permutation(len(members))]
        bounds = np.cumsum([0] + sizes)
        for split, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            for idx in members[lo:hi]:
                assignment[idx] = split
    if too_small:
        raise DataError(f"classes too small for non-empty train/val/test parts: {', '.join(too_small)}")
    return SplitAssignment(assignment, seed, fractions)


# ---------------------------------------------------------------- images


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of the last two axes with half-pixel centres.

    Samples outside the source grid clamp to the edge.  Resizing to the same
    size is the identity.
    """
    image = np.asarray(image)
    in_h, in_w = image.shape[-2:]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    r0, r1, fr = axis_weights(in_h, out_h)
    c0, c1, fc = axis_weights(in_w, out_w)
    work = image.astype(np.float64)
    rows = work[..., r0, :] * (1 - fr)[:, None] + work[..., r1, :] * fr[:, None]
    out = rows[..., c0] * (1 - fc) + rows[..., c1] * fc
    return out.astype(np.float32)


def read_grayscale(path) -> np.ndarray:
    """Image as float32 in [0, 1]; colour images are converted to luminance."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    return arr.astype(np.float32)


def preprocess(gray: np.ndarray, size: int, mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD) -> np.ndarray:
    """(H, W) image in [0, 1] -> standardized (3, size, size) array."""
    img = bilinear_resize(gray, size, size) if gray.shape != (size, size) else gray.astype(np.float32)
    img = (img - np.float32(mean)) / np.float32(std)
    return np.repeat(img[None], 3, axis=0)


def load_batch(
    manifest: DatasetManifest,
    indices: Sequence[int],
    size: int,
    mean: float = DEFAULT_MEAN,
    std: float = DEFAULT_STD,
) -> tuple[Tensor, np.ndarray]:
    images = [preprocess(read_grayscale(manifest.absolute(manifest.entries[i])), size, mean, std) for i in indices]
    labels = np.array([manifest.entries[i].label for i in indices], dtype=np.int64)
    return Tensor(np.stack(images)), labels


class ImageSource:
    """Decoded, preprocessed images of one split, optionally cached in memory."""

    def __init__(
        self,
        manifest: DatasetManifest,
        indices: Sequence[int],
        size: int,
        mean: float = DEFAULT_MEAN,
        std: float = DEFAULT_STD,
        cache: bool = True,
    ):
        self.manifest, self.size, self.mean, self.std = manifest, size, mean, std
        self.indices = np.asarray(indices, dtype=np.int64)
        self.labels = manifest.labels[self.indices] if len(self.indices) else np.zeros(0, np.int64)
        self._cache: np.ndarray | None = None
        if cache and len(self.indices):
            self._cache = load_batch(manifest, self.indices, size, mean, std)[0].data

    @classmethod
    def from_arrays(cls, images: np.ndarray, labels: np.ndarray) -> "ImageSource":
        src = cls.__new__(cls)
        src.manifest, src.size, src.mean, src.std = None, images.shape[-1], DEFAULT_MEAN, DEFAULT_STD
        src.indices = np.arange(len(labels))
        src.labels = np.asarray(labels, dtype=np.int64)
        src._cache = np.ascontiguousarray(images, dtype=np.float32)
        return src

    def __len__(self) -> int:
        return len(self.indices)

    def get(self, positions: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        positions = np.asarray(positions, dtype=np.int64)
        if self._cache is not None:
            return self._cache[positions], self.labels[positions]
        x, y = load_batch(self.manifest, self.indices[positions], self.size, self.mean, self.std)
        return x.data, y

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else order
        for chunk in batch_slices(len(order), batch_size):
            yield self.get(order[chunk])


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing singleton merges into the previous batch
    so that train-mode batchnorm always sees at least two samples."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = False
    flip_prob: float = 0.5
    max_rotation: float = 10.0  # degrees


def augment(batch: np.ndarray, config: AugmentConfig, seed) -> np.ndarray:
    """Random horizontal flips and small rotations, per sample and seeded."""
    if not config.enabled:
        return batch
    from scipy.ndimage import rotate

    rng = np.random.default_rng(seed)
    out = np.array(batch, copy=True)
    for i in range(out.shape[0]):
        if rng.random() < config.flip_prob:
            out[i] = out[i][..., ::-1]
        angle = rng.uniform(-config.max_rotation, config.max_rotation) if config.max_rotation else 0.0
        if angle:
            out[i] = rotate(out[i], angle, axes=(-1, -2), reshape=False, order=1, mode="nearest")
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Class ``c`` gets a bright Gaussian blob inside image quadrant ``c``.

    Quadrants are numbered row-major: 0 top-left, 1 top-right, 2 bottom-left,
    3 bottom-right (classes beyond 3 wrap around).
    """

    counts: tuple[int, ...]
    image_size: int = 64
    noise: float = 0.1
    blob_amplitude: float = 0.7
    blob_sigma: float | None = None  # defaults to image_size / 16
    background: float = 0.2
    seed: int = 0
    class_names: tuple[str, ...] = RADIOGRAPHY_CLASSES

    def __post_init__(self):
        if any(c < 1 for c in self.counts):
            raise ConfigurationError("synthetic class counts must be >= 1")
        if self.image_size < 16:
            raise ConfigurationError("synthetic image size must be >= 16")
        if len(self.class_names) != len(self.counts):
            raise ConfigurationError("need one class name per count")


def table3_preset_counts(divisor: int = 50) -> tuple[int, ...]:
    return tuple(int(round(c / divisor)) for c in RADIOGRAPHY_COUNTS)


PRESETS = {
    "easy": dict(counts=(100, 100, 100, 100), noise=0.1, blob_amplitude=0.7),
    "imbalanced": dict(counts=table3_preset_counts(50), noise=0.15, blob_amplitude=0.5),
}


def preset_spec(name: str, seed: int = 0, **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    opts = dict(PRESETS[name], seed=seed)
    opts.update(overrides)
    return SyntheticSpec(**opts)


def quadrant_bounds(label: int, size: int) -> tuple[slice, slice]:
    q = label % 4
    half = size // 2
    rows = slice(0, half) if q < 2 else slice(half, size)
    cols = slice(0, half) if q % 2 == 0 else slice(half, size)
    return rows, cols


def synthetic_image(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, tuple[float, float]]:
    """uint8 image and the blob centre (row, col)."""
    size = spec.image_size
    sigma = spec.blob_sigma or size / 16
    rows, cols = quadrant_bounds(label, size)
    margin = size / 8
    cy = rng.uniform(rows.start + margin, rows.stop - margin)
    cx = rng.uniform(cols.start + margin, cols.stop - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    blob = spec.blob_amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    img = spec.background + blob + spec.noise * rng.standard_normal((size, size))
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8), (cy, cx)


def generate_synthetic(spec: SyntheticSpec, out_dir, force: bool = False) -> DatasetManifest:
    """Write an image-folder tree plus ``manifest.csv`` and return the manifest."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"destination {out} exists and is not empty")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise DataError(f"destination {out} is not writable")
    rng = np.random.default_rng(spec.seed)
    entries = []
    for label, (name, count) in enumerate(zip(spec.class_names, spec.counts)):
        (out / name).mkdir(exist_ok=True)
        for i in range(count):
            img, _ = synthetic_image(label, spec, rng)
            rel = f"{name}/{i:04d}.png"
            Image.fromarray(img).save(out / rel, format="PNG", optimize=False)
            entries.append(ManifestEntry(rel, label, name))
    manifest = DatasetManifest(entries, list(spec.class_names), out)
    manifest.write_csv(out / "manifest.csv")
    return manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
