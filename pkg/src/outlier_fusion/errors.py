"""Exception hierarchy shared by the whole package.

The CLI maps these onto stable exit codes: ConfigError -> 1,
DataSchemaError -> 2, NumericError (and subclasses) -> 3.
"""


class FusionError(Exception):
    """Base class for every package-specific failure."""


class ConfigError(FusionError):
    """Invalid run configuration (bad key, bad value, bad combination)."""


class DataSchemaError(FusionError):
    """Input file does not match the expected schema."""


class DomainError(FusionError, ValueError):
    """Argument outside its documented domain."""


class ShapeMismatchError(FusionError, ValueError):
    """Array arguments whose shapes do not line up."""


class NumericError(FusionError):
    """Base for numeric failures (non-convergence, singularity, NaN)."""


class NotPositiveDefiniteError(NumericError):
    """Cholesky factorization hit a non-positive pivot."""


class SingularGramError(NumericError):
    """Gram matrix is singular and no regularizer was supplied."""


class DegenerateDataError(NumericError):
    """Data too degenerate for a covariance-based estimate."""


class ConvergenceError(NumericError):
    """Iterative solver ran out of iterations.

    Carries the final KKT violation so callers can judge how close the
    solver got.
    """

    def __init__(self, message: str, kkt_violation: float | None = None):
        super().__init__(message)
        self.kkt_violation = kkt_violation


class TrainingDivergedError(NumericError):
    """Training loss became non-finite; ``step`` is the offending step index."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
