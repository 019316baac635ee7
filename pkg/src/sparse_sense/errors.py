"""Exception types raised across the package."""


class SparseSenseError(Exception):
    """Base class for all package errors."""


class ParameterError(SparseSenseError, ValueError):
    """An argument is outside its valid domain."""


class BudgetViolationError(SparseSenseError):
    """An allocation spends more effort than remains."""


class NoObservationError(SparseSenseError):
    """A measurement was requested for a component that receives no effort."""


class NumericalError(SparseSenseError, ArithmeticError):
    """Quadrature or another numerical routine failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceError(SparseSenseError):
    """An iterative solver hit its iteration cap.

    The best iterate found so far is kept on ``best`` so callers can decide
    whether it is good enough.
    """

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class DependencyError(SparseSenseError):
    """A calibration step needs results for fewer stages that are missing."""
