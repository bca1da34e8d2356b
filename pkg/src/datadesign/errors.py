"""Exception types raised across the package."""


class DataDesignError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DataDesignError, ValueError):
    pass


class InvalidMatrix(DataDesignError, ValueError):
    pass


class InvalidDegreesOfFreedom(DataDesignError, ValueError):
    pass


class UnsupportedConfiguration(DataDesignError, ValueError):
    pass


class SingularKernelMatrix(DataDesignError, ArithmeticError):
    pass


class DegeneratePair(DataDesignError, ValueError):
    pass


class DegenerateTarget(DataDesignError, ValueError):
    pass


class ExhaustedPool(DataDesignError, ValueError):
    pass


class NonFiniteValue(DataDesignError, ArithmeticError):
    """Raised when an optimizer produces NaN/Inf; ``record`` holds diagnostics."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class NoConvergence(DataDesignError, RuntimeError):
    """Fixed-point iteration ran out of budget.

    The last iterate is kept on ``last_iterate`` so callers can still use it.
    """

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
