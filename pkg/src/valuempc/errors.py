"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (usually a dimension)."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""


class DimensionError(CheckpointError, ContractError):
    """A checkpoint does not match the environment it is loaded for."""


class TrainingAborted(RuntimeError):
    """Value iteration stopped because too many solves failed or the loss diverged."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
