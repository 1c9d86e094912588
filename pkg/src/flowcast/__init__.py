"""Traffic flow forecasting on sensor graphs.

Learned dynamic adjacency, spectral and calendar embeddings, trend-seasonality
decomposition, and a GRU encoder with a bottleneck-attention decoder, all on a
small self-contained reverse-mode tensor engine.
"""

from .errors import (
    ConfigError,
    ContractError,
    ConvergenceError,
    DataSizeError,
    DimensionError,
    DivergenceError,
    FlowcastError,
    FormatError,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "FlowcastError",
    "DimensionError",
    "ContractError",
    "FormatError",
    "DataSizeError",
    "ConvergenceError",
    "DivergenceError",
    "ConfigError",
    "__version__",
]
