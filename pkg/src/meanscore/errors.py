"""Exception hierarchy.  The CLI maps these onto its exit codes."""


class MeanScoreError(Exception):
    """Base class for errors raised by this package."""


class DataError(MeanScoreError, ValueError):
    """Input data is malformed or inconsistent (bad column, missing covariates, ...)."""


class EstimationError(MeanScoreError):
    """A model cannot be estimated from the supplied data."""


class ConvergenceError(EstimationError):
    """The Newton-Raphson iteration did not converge.

    ``last`` holds the last iterate (a ``ThetaParams`` or array) when available.
    """

    def __init__(self, message, last=None, iterations=None, gradient_norm=None):
        super().__init__(message)
        self.last = last
        self.iterations = iterations
        self.gradient_norm = gradient_norm


class SingularMatrixError(EstimationError):
    """An information matrix is singular; ``direction`` spans its null space."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction
