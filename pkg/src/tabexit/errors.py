"""Exception hierarchy shared across the package."""


class TabExitError(Exception):
    """Base class for all errors raised by tabexit."""


class ConfigurationError(TabExitError, ValueError):
    pass


class DimensionError(TabExitError, ValueError):
    pass


class NumericInputError(TabExitError, ValueError):
    pass


class ContractError(TabExitError, ValueError):
    """A documented precondition of an operation was violated."""


class CapacityError(TabExitError, ValueError):
    """A task exceeds the feature/class capacity of a model."""


class TrainingError(TabExitError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IngestionError(TabExitError, ValueError):
    pass


class MetricError(TabExitError, ValueError):
    pass


class CheckpointError(TabExitError, ValueError):
    pass
