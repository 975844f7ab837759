"""Deep-narrow ResNets, dilated pooling, cost analysis and spectral filtering on NumPy."""

from .arch import ArchSpec, DownsampleKind, Network, build, deep_narrow, load_checkpoint, save_checkpoint
from .cost import CostReport, count_flops, count_params, report
from .data import Dataset, SyntheticSpec, load_image_folder, synthetic_dataset
from .freq import FilterSpec, apply_filter, make_mask
from .tensor import DimensionError, NumericError, ValidationError
from .train import Metrics, TrainConfig, evaluate, sgd_step, topk_accuracy, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "CostReport",
    "Dataset",
    "DimensionError",
    "DownsampleKind",
    "FilterSpec",
    "Metrics",
    "Network",
    "NumericError",
    "SyntheticSpec",
    "TrainConfig",
    "ValidationError",
    "apply_filter",
    "build",
    "count_flops",
    "count_params",
    "deep_narrow",
    "evaluate",
    "load_checkpoint",
    "load_image_folder",
    "make_mask",
    "report",
    "save_checkpoint",
    "sgd_step",
    "synthetic_dataset",
    "topk_accuracy",
    "train",
]
