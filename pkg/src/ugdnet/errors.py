"""Exception hierarchy shared by every module."""


class UGDError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UGDError, ValueError):
    """Shapes, sizes or hyperparameters that cannot work together."""


class InputError(UGDError, ValueError):
    """Malformed tensors or arrays handed to an operation."""


class NonFiniteError(InputError):
    """NaN or infinity where finite values are required."""


class StateError(UGDError, RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


class LoadError(UGDError):
    """Checkpoint or dataset could not be loaded."""


class FormatError(LoadError):
    """A file exists but its content has the wrong format."""


class SplitError(UGDError, ValueError):
    """Dataset split cannot be produced."""


class SpecError(UGDError, ValueError):
    """Invalid synthetic-data parameters."""


class TrainingAborted(UGDError, RuntimeError):
    """Training stopped because of a non-finite loss or gradient."""

    def __init__(self, message: str, step: int | None = None, name: str | None = None):
        super().__init__(message)
        self.step = step
        self.name = name
