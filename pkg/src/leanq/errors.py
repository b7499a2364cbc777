"""Exception types shared across the toolkit.

The split mirrors the CLI exit codes: bad or inconsistent input data is a
DataError (exit 2), numerical breakdown (non-PD matrices, degenerate
diagonals) is a NumericalError (exit 3).
"""


class LeanQuantError(Exception):
    """Base class for all toolkit errors."""


class DataError(LeanQuantError, ValueError):
    """Malformed, inconsistent, or missing input data."""


class NumericalError(LeanQuantError, ArithmeticError):
    """Numerical failure: loss of positive definiteness, degenerate diagonals."""


class DegenerateHessianWarning(UserWarning):
    """Raised when dampening is requested on an all-zero Hessian diagonal."""
