"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes (see ``triformer.cli``).
"""


class TriformerError(Exception):
    """Base class for all package errors."""


class UsageError(TriformerError):
    pass


class DimensionError(TriformerError, ValueError):
    pass


class ConfigError(TriformerError, ValueError):
    pass


class NumericError(TriformerError, ArithmeticError):
    """A forward value or loss became NaN/Inf."""


class DataError(TriformerError, ValueError):
    pass


class SplitError(DataError):
    pass


class FormatError(DataError):
    """Malformed HSC cube or TFCK checkpoint."""


class MetricError(TriformerError, ValueError):
    pass
