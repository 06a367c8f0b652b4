"""Variance functions sigma^2(z'gamma) and their derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConstraintError, RegistryError, SingularVarianceError

FLOOR_FACTOR = 1e-8

Scalar = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class VarianceFunction:
    """A known variance function of a linear index.

    ``eval``, ``d1`` and ``d2`` act elementwise on arrays of linear indices.
    ``domain_check(index, gamma)`` returns ``None`` when the pair is admissible
    and an error message otherwise.
    """

    kind: str
    eval: Scalar
    d1: Scalar
    d2: Scalar
    domain_check: Callable[[np.ndarray, np.ndarray], str | None] = lambda index, gamma: None

    def check(self, index, gamma) -> None:
        msg = self.domain_check(np.asarray(index, dtype=float), np.asarray(gamma, dtype=float))
        if msg is not None:
            raise ConstraintError(msg)

    def evaluate(self, gamma, Z, *, check: bool = True):
        """Return (sigma2, d1, d2) for every row of ``Z``, without flooring."""
        gamma = np.asarray(gamma, dtype=float)
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != gamma.shape[0]:
            raise ConstraintError(
                f"variance covariates have {Z.shape[-1]} columns but gamma has {gamma.shape[0]}"
            )
        index = Z @ gamma
        if check:
            self.check(index, gamma)
        return self.eval(index), self.d1(index), self.d2(index)


def _exp_domain(index, gamma):
    if not np.all(np.isfinite(index)):
        return "non-finite linear index"
    if np.any(index > 700.0):
        return "linear index overflows exp"
    return None


def _quad_domain(index, gamma):
    if gamma.size == 0 or not gamma[0] > 0:
        return f"quadratic variance function requires gamma[0] > 0, got {gamma[:1]}"
    if not np.all(np.isfinite(index)):
        return "non-finite linear index"
    return None


def exponential() -> VarianceFunction:
    return VarianceFunction("exponential", np.exp, np.exp, np.exp, _exp_domain)


def quadratic() -> VarianceFunction:
    return VarianceFunction(
        "quadratic",
        np.square,
        lambda x: 2.0 * x,
        lambda x: np.full_like(x, 2.0),
        _quad_domain,
    )


def custom(eval: Scalar, d1: Scalar, d2: Scalar, domain_check=None) -> VarianceFunction:
    """User-supplied variance function; both derivatives are required."""
    if d1 is None or d2 is None:
        raise ValueError("custom variance functions must supply d1 and d2")
    return VarianceFunction("custom", eval, d1, d2, domain_check or (lambda index, gamma: None))


REGISTRY = {"exponential": exponential, "quadratic": quadratic}


def get(kind) -> VarianceFunction:
    if isinstance(kind, VarianceFunction):
        return kind
    try:
        return REGISTRY[kind]()
    except KeyError:
        raise RegistryError(f"unknown variance function {kind!r}; known: {sorted(REGISTRY)}") from None


def floor_variances(sigma2, reference=None):
    """Floor variances at ``FLOOR_FACTOR * median(reference)``.

    Returns the floored array and whether any entry was raised.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    ref = sigma2 if reference is None else np.asarray(reference, dtype=float)
    floor = FLOOR_FACTOR * float(np.median(ref))
    if not floor > 0 or not np.isfinite(floor):
        raise SingularVarianceError("median observation variance is not positive")
    low = sigma2 < floor
    if low.any():
        sigma2 = np.where(low, floor, sigma2)
    return sigma2, bool(low.any())


def eval_variance(vf: VarianceFunction, gamma, z):
    """sigma^2, its first and second derivative at the index z'gamma."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != gamma.shape:
        raise ConstraintError(f"z has length {z.size} but gamma has length {gamma.size}")
    s, d1, d2 = vf.evaluate(gamma, z[None, :])
    return float(s[0]), float(d1[0]), float(d2[0])
