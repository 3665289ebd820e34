"""Typed errors raised by the eager validation paths.

Validation can only raise in eager (non-traced) execution; inside jit the
offending values propagate as NaN and are caught at the training-loop level.
"""


class VarsmoothError(Exception):
    """Base class for all library errors."""


class NumericInputError(VarsmoothError):
    """An input carried non-finite entries."""


class ShapeError(VarsmoothError):
    """Operands have incompatible dimensions."""


class CholeskyBreakdownError(VarsmoothError):
    """A Cholesky factorization failed after all jitter retries.

    Attributes:
        pivot: index of the first non-finite diagonal entry of the factor.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class ConsistencyError(VarsmoothError):
    """A quantity violated a mathematical invariant beyond tolerance (e.g. KL < -1e-9)."""


class ConfigError(VarsmoothError):
    """A configuration file or override is malformed or names unknown keys."""
