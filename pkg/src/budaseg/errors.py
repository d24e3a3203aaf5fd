"""Structured exceptions shared across the package."""


class BudaSegError(Exception):
    """Base class for all package errors."""


class ShapeError(BudaSegError):
    """A tensor or label map has an incompatible shape.

    Carries the offending dimension so callers can report precisely.
    """

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class GradientError(BudaSegError):
    """Backward was invoked on an invalid target or with missing gradients."""


class ConfigError(BudaSegError):
    """A configuration document is malformed or contains unknown keys."""


class DataError(BudaSegError):
    """Dataset construction or ingestion failed validation."""


class DivergenceError(BudaSegError):
    """Training produced non-finite losses.

    ``last_good_state`` holds the parameter snapshot taken before the
    diverging update, as a ``name -> ndarray`` dict.
    """

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state
