"""Exception types shared across the package."""


class IncsegError(Exception):
    """Base class for all package errors."""


class ScheduleConflictError(IncsegError):
    """Step class sets overlap or claim the background id."""


class UnsupportedError(IncsegError):
    """Requested operation is outside the supported contract."""


class SingleClassStepError(UnsupportedError):
    """Incremental steps must introduce at least two classes."""


class ShapeError(IncsegError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericInputError(IncsegError):
    """Non-finite or otherwise invalid numeric input."""


class ConfigError(IncsegError):
    """Invalid configuration value or combination."""


class EmptyTargetError(IncsegError):
    """A loss was asked to average over an empty class set."""


class ContractViolationError(IncsegError):
    """A value-range contract on an input was violated."""


class SupervisionError(IncsegError):
    """Record carries the wrong supervision kind for the training step."""


class SchemaError(IncsegError):
    """Channel/class bookkeeping between artifacts does not line up."""


class DataError(IncsegError):
    """Out-of-range or malformed data values."""


class MetricError(IncsegError):
    """Metric is undefined for the accumulated state."""


class ParseError(IncsegError):
    """Malformed text input; message carries the offending line number."""
