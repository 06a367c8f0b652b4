"""Exception hierarchy.

Every error raised by the library derives from :class:`HnervfError`.  The
``stage`` attribute is filled in by :func:`hnervf.estimation.fit` so callers
can tell which step of the pipeline failed.
"""

from __future__ import annotations


class HnervfError(Exception):
    stage: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ShapeError(HnervfError, ValueError):
    """Array dimensions are inconsistent."""


class ConstraintError(HnervfError, ValueError):
    """Parameters fall outside the variance function's domain."""


class SingularVarianceError(HnervfError):
    """Observation variances collapse to zero even after flooring."""


class SingularDesignError(HnervfError):
    """The covariate matrix (or a GLS normal matrix) is rank deficient."""

    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


class RankError(HnervfError):
    """An auxiliary matrix needed for a formula cannot be inverted."""


class ConvergenceError(HnervfError):
    """Newton iterations hit the cap without meeting the tolerance."""

    def __init__(self, message: str, last_iterate=None, residual: float | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class PreconditionError(HnervfError, ValueError):
    """Input data do not satisfy an operation's precondition."""


class KurtosisUnidentifiedError(HnervfError):
    """The fourth-moment equations carry no information for the data."""


class RegistryError(HnervfError, KeyError):
    """Unknown name requested from a registry."""


class StudyFailureError(HnervfError):
    """Too many replications of a simulation study failed."""
