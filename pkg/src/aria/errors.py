"""Exception types shared across the package.

The CLI maps ``InputError`` to exit code 1 and ``NumericError`` to exit code 2.
"""


class AriaError(Exception):
    pass


class InputError(AriaError, ValueError):
    """Malformed, inconsistent, or missing input data."""


class NumericError(AriaError, ArithmeticError):
    """A numerical routine failed (non-convergence, zero matrix, undefined statistic)."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual
