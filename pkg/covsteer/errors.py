"""
Exception hierarchy shared by every covsteer module.

The CLI maps each class onto a stable exit code (see ``covsteer.cli``).
"""

from typing import Optional


class CovSteerError(Exception):
    """Base class for all errors raised by covsteer."""


class DimensionError(CovSteerError, ValueError):
    """Array shapes are not square or not conformable."""


class NumericError(CovSteerError):
    """A numerical routine failed to converge."""

    def __init__(self, message: str, matrix=None):
        super().__init__(message)
        self.matrix = matrix

    def __str__(self):
        base = super().__str__()
        if self.matrix is None:
            return base
        return f"{base}\n{self.matrix!r}"


class SingularityError(CovSteerError):
    """A matrix that must be invertible is singular (or numerically so)."""

    def __init__(self, message: str, stage: Optional[int] = None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


class PreconditionError(CovSteerError, ValueError):
    """A documented precondition of an operation does not hold."""


class ProblemParseError(CovSteerError):
    """A problem or result file cannot be read or parsed."""


class ProblemValidationError(CovSteerError, ValueError):
    """A parsed problem violates an invariant."""

    def __init__(self, message: str, field: Optional[str] = None, stage: Optional[int] = None):
        prefix = []
        if field is not None:
            prefix.append(f"field '{field}'")
        if stage is not None:
            prefix.append(f"stage {stage}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)
        self.field = field
        self.stage = stage


class SubproblemFailed(CovSteerError):
    """The conic backend did not return an optimal point."""

    def __init__(self, message: str, status=None, iteration: Optional[int] = None, trace=None):
        super().__init__(message)
        self.status = status
        self.iteration = iteration
        self.trace = trace


class NoConvergence(CovSteerError):
    """The sequential convex loop hit its iteration or weight cap."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class ToleranceExceeded(CovSteerError):
    """Monte Carlo statistics disagree with a prediction beyond the acceptance band."""


class ProblemDimensionError(ProblemValidationError, DimensionError):
    """A problem field has the wrong shape for the declared dimensions."""
