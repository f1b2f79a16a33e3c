"""Tri-Former hyperspectral classifier with single-direction tuning, on a small numpy autodiff engine."""

from .errors import (ConfigError, DataError, DimensionError, FormatError, MetricError,
                     NumericError, SplitError, TriformerError, UsageError)
from .tensor import Tensor, backward, counting, no_grad
from .model import TriFormerConfig, TriFormerModel, param_count
from .sdt import DualModel, SdtConfig

__version__ = "0.1.0"
