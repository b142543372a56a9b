"""Kernel inflation, CNN-LSTM cascades and valence/arousal evaluation on numpy."""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, FormatError, InflateNNError, LengthError, NonFiniteError,
                     TrainingError, UndefinedMetricError)
from .graph import ModelSpec, build_cnn_lstm, build_i3d, build_vgg_mini, model_backward, model_forward
from .inflation import C1, C2, InflationConfig, inflate_kernel, inflate_model
from .metrics import compute_ccc, compute_mae, compute_mape, compute_pcc, evaluate
from .postprocess import mean_filter, scale_normalize, time_delay_align
from .training import TrainConfig, adam_step, fit

__all__ = [
    "C1", "C2", "ConfigError", "DataError", "FormatError", "InflateNNError", "InflationConfig",
    "LengthError", "ModelSpec", "NonFiniteError", "TrainConfig", "TrainingError", "UndefinedMetricError",
    "adam_step", "build_cnn_lstm", "build_i3d", "build_vgg_mini", "compute_ccc", "compute_mae",
    "compute_mape", "compute_pcc", "evaluate", "fit", "inflate_kernel", "inflate_model", "mean_filter",
    "model_backward", "model_forward", "scale_normalize", "time_delay_align",
]
