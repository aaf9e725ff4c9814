"""From-scratch NumPy CPU engine for the PP-LCNet image classifier: inference
kernels, cost analysis, architecture variants, weight files, a hand-written
backward pass and a toy trainer.
"""

from .analysis import CostReport, count_macs, count_params, summarize
from .arch import LCNetConfig, Model, build_model, forward
from .errors import (
    ConfigError,
    CorruptFileError,
    DegenerateBatchError,
    InvalidShapeError,
    LCNetError,
    ShapeMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptFileError",
    "CostReport",
    "DegenerateBatchError",
    "InvalidShapeError",
    "LCNetConfig",
    "LCNetError",
    "Model",
    "ShapeMismatchError",
    "build_model",
    "count_macs",
    "count_params",
    "forward",
    "summarize",
]
