"""AttCDCNet: DenseNet-121 with channel attention and depthwise-separable
convolutions for four-class chest radiograph classification, in NumPy."""

from .autograd import GradTape, Tensor, backward, precision
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    DatasetManifest,
    ImageSource,
    SyntheticSpec,
    generate_synthetic,
    preset_spec,
    scan_image_folder,
    split_dataset,
)
from .errors import (
    AttCDCNetError,
    CheckpointError,
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    NumericalError,
)
from .estimator import AttCDCNetClassifier
from .explain import grad_cam
from .losses import FocalLossConfig, cross_entropy, focal_loss
from .metrics import MetricsReport, compute_metrics
from .model import AttCDCNet, ModelConfig, build_model, complexity_report, count_parameters, summarize
from .training import TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "AttCDCNet", "AttCDCNetClassifier", "AttCDCNetError", "Checkpoint", "CheckpointError",
    "ConfigurationError", "ContractError", "DataError", "DatasetManifest", "DimensionError",
    "FocalLossConfig", "GradTape", "ImageSource", "MetricsReport", "ModelConfig", "NumericalError",
    "SyntheticSpec", "Tensor", "TrainConfig", "backward", "build_model", "complexity_report",
    "compute_metrics", "count_parameters", "cross_entropy", "evaluate", "fit", "focal_loss",
    "generate_synthetic", "grad_cam", "load_checkpoint", "precision", "preset_spec", "save_checkpoint",
    "scan_image_folder", "split_dataset", "summarize",
]
