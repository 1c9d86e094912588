"""Exception types shared across the toolkit."""


class FlowcastError(Exception):
    """Base class for all toolkit-specific failures."""


class DimensionError(FlowcastError, ValueError):
    """Tensor/matrix shapes are incompatible for the requested operation."""


class ContractError(FlowcastError, RuntimeError):
    """An API precondition was violated (consumed tape, non-scalar root, ...)."""


class FormatError(FlowcastError, ValueError):
    """A binary or text file does not match its declared format.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataSizeError(FlowcastError, ValueError):
    """A dataset is too small for the requested windowing or split."""


class ConvergenceError(FlowcastError, RuntimeError):
    """An iterative numerical routine failed to reach its tolerance."""


class DivergenceError(FlowcastError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(FlowcastError, ValueError):
    """A run configuration document or override is invalid."""
