"""Exception hierarchy shared by every ivgae module."""


class IvgaeError(Exception):
    """Base class for all library errors."""


class DimensionError(IvgaeError, ValueError):
    pass


class DomainError(IvgaeError, ValueError):
    """A numeric op was fed values outside its domain (log of a non-positive, ...)."""


class ContractError(IvgaeError, ValueError):
    pass


class ConfigError(IvgaeError, ValueError):
    pass


class DeterminismError(IvgaeError, RuntimeError):
    pass


class LoadError(IvgaeError, ValueError):
    pass


class SchemaError(IvgaeError, ValueError):
    pass


class DegenerateColumnError(IvgaeError, ValueError):
    pass


class EmptyColumnError(IvgaeError, ValueError):
    pass


class EmptyAggregationError(IvgaeError, ValueError):
    pass


class InfeasibleRateError(IvgaeError, ValueError):
    pass


class MechanismInfeasibleError(IvgaeError, ValueError):
    pass


class GraphConstructionError(IvgaeError, ValueError):
    pass


class TrainingDivergedError(IvgaeError, RuntimeError):
    """Raised when the loss turns NaN; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
