"""Exception types shared across the package."""


class S2DiffError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(S2DiffError):
    """A vector or matrix has the wrong shape for the target system."""


class DomainError(S2DiffError):
    """An input contains non-finite entries."""


class UnsupportedStructureError(S2DiffError):
    """Operation requires control-affine structure the system lacks."""


class IntegrationBlowupError(S2DiffError):
    """Numerical integration produced a non-finite state."""

    def __init__(self, message, state=None, step_index=None):
        super().__init__(message)
        self.state = state
        self.step_index = step_index


class ContractError(S2DiffError):
    """A caller violated a documented precondition."""


class EvaluationError(S2DiffError):
    """Density evaluation hit non-finite values (distinct from a legal -inf)."""


class TrainingDivergenceError(S2DiffError):
    """Training loss became non-finite."""

    def __init__(self, message, minibatch_index=None):
        super().__init__(message)
        self.minibatch_index = minibatch_index


class EpochError(S2DiffError):
    """Every trajectory of a collection epoch failed."""


class ConfigError(S2DiffError):
    """A run configuration failed validation; message names the field."""
