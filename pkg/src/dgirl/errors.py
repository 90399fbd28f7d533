"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class EmptyContextError(ContractViolation):
    """Attention or encoding was asked to work over zero positions."""


class UsageError(RuntimeError):
    """An API was used out of order (e.g. backward before any forward)."""


class NondeterministicLossError(RuntimeError):
    """A loss gave different values for identical parameters."""


class TrainingDiverged(RuntimeError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
