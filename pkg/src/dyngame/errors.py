"""Typed failures raised across the package.

Each error maps to a CLI exit code so that scripts can tell a bad config
apart from a solver that simply did not converge.
"""


class DyngameError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(DyngameError, ValueError):
    """Array shapes do not agree with the game dimensions."""


class ValidationError(DyngameError, ValueError):
    """Problem data violates an invariant (e.g. R not positive definite)."""


class AssumptionError(DyngameError):
    """A standing assumption (invertibility, stabilizability, ...) fails."""

    exit_code = 2


class ResonanceError(DyngameError, ArithmeticError):
    """A linear matrix equation has no unique solution."""

    exit_code = 3


class ConvergenceError(DyngameError):
    """An iterative method stopped before meeting its tolerance.

    The ``diagnostics`` dict carries the last iterate's residuals so callers
    can inspect how far off the method was.
    """

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class InfeasibleError(DyngameError):
    """The finite-horizon feasible set appears to be empty."""

    exit_code = 4

    def __init__(self, message, diagnostics=None, partial=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
        self.partial = partial
