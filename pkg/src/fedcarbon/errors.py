"""Exception types shared across the simulator."""


class FedCarbonError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedCarbonError, ValueError):
    """Invalid parameters, configuration values or infeasible setups."""


class ShapeError(FedCarbonError, ValueError):
    """Array dimensions or indices that do not fit the model."""


class NumericError(FedCarbonError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class IngestionError(FedCarbonError, ValueError):
    """A carbon trace file could not be parsed or is incomplete."""


class InvariantViolation(FedCarbonError, RuntimeError):
    """An internal accounting invariant was broken (a bug, not user error)."""
