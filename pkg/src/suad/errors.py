"""Exception hierarchy shared by the whole package.

Every error raised on purpose derives from :class:`SuadError` so callers
(and the CLI exit-code mapping) can distinguish expected failure modes
from genuine bugs.
"""


class SuadError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SuadError):
    """Tensor or volume shapes do not satisfy an operation's contract."""


class NumericError(SuadError):
    """A computation produced non-finite values (NaN or Inf)."""


class ParameterError(SuadError):
    """An operation parameter is outside its valid range."""


class TransformError(SuadError):
    """A rigid transform is not a proper rotation plus translation."""


class GeometryError(SuadError):
    """A crop window or slice index falls outside the volume."""


class ConfigError(SuadError):
    """A run configuration is malformed or internally inconsistent."""


class FormatError(SuadError):
    """A persisted file does not match its binary or text format."""


class ChecksumError(FormatError):
    """A checkpoint's content checksum does not validate."""


class EvaluationError(SuadError):
    """Metric inputs are degenerate (e.g. a single-class record set)."""


class DataError(SuadError):
    """A record carries an unknown label or anomaly category."""


class ContractViolation(SuadError):
    """A caller broke an API contract (e.g. anomalies in training data)."""
