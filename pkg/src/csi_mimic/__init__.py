"""Codeword-mimic distillation lab for CSI-feedback autoencoders."""
from .autodiff import ConfigError, DimensionError, UsageError
from .data import ChannelConfig, Dataset, FormatError, build_dataset
from .distill import TrainPlan, TrainedPair
from .metrics import ExperimentReport, nmse, render_table
from .nn import ModelSpec, count_complexity

__all__ = [
    "ChannelConfig", "ConfigError", "Dataset", "DimensionError", "ExperimentReport", "FormatError",
    "ModelSpec", "TrainPlan", "TrainedPair", "UsageError", "build_dataset", "count_complexity",
    "nmse", "render_table",
]
__version__ = "0.1.0"
