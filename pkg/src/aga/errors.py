"""Exception types raised across the package."""


class AgaError(Exception):
    """Base class for all package errors."""


class ShapeError(AgaError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(AgaError, ValueError):
    """A numeric parameter is outside its valid range."""


class ConfigError(AgaError, ValueError):
    """A configuration object violates one of its invariants."""


class ContractError(AgaError, RuntimeError):
    """A call violated an operation's precondition."""


class EmptyHistoryError(AgaError, ValueError):
    """Attention was asked to attend over zero key/value rows."""


class GuidanceError(AgaError, ValueError):
    """Ground-truth guidance was requested but labels are unavailable."""


class CapabilityError(AgaError, RuntimeError):
    """The model configuration does not support the requested analysis."""


class LossError(AgaError, ValueError):
    """A loss was requested over zero supervised timesteps."""


class DivergenceError(AgaError, RuntimeError):
    """Training produced a non-finite loss.

    ``snapshot`` holds a small diagnostic dict (epoch, step, loss, parameter norms).
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class AnalysisAborted(AgaError, RuntimeError):
    """Backward analysis hit a non-finite loss; ``trace`` holds losses so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class FormatError(AgaError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(AgaError, ValueError):
    """A checkpoint failed its integrity check or could not be parsed."""
