"""Exception hierarchy shared by every module of the package."""


class SSMReduceError(Exception):
    """Base class for all package errors."""


class DimensionError(SSMReduceError, ValueError):
    """Array shapes do not agree."""


class StabilityError(SSMReduceError):
    """A system has an eigenvalue of modulus >= 1 (within margin)."""


class ConvergenceError(SSMReduceError):
    """An iterative solver ran out of iterations.

    The last relative update norm is kept on ``residual``.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class NumericalError(SSMReduceError, ArithmeticError):
    """A numerical quantity is non-finite or violates positivity."""


class MinimalityError(SSMReduceError):
    """Gramian factorization failed: the realization is (nearly) non-minimal."""


class ConditioningError(SSMReduceError):
    """An eigenbasis is too ill-conditioned to be used."""


class IncomparableError(SSMReduceError, ValueError):
    """Two snapshots/spectra cannot be compared (different dimensions)."""


class InvariantError(SSMReduceError):
    """An internal invariant was violated by the caller's input."""


class ConfigError(SSMReduceError, ValueError):
    """A configuration document violates the schema.

    ``path`` holds the dotted location of the offending field.
    """

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class FormatError(SSMReduceError, ValueError):
    """A file on disk does not follow the expected layout."""
