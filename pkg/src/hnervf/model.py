"""Data containers and the covariance algebra of the nested error model.

Within a cluster the response covariance is ``tau2 * J + W`` with ``W`` the
diagonal matrix of observation variances.  Its inverse is always taken in
closed form:

    Sigma^{-1} = W^{-1} (I - tau2 J W^{-1} / eta),   eta = 1 + tau2 * sum(1 / sigma2)

The :class:`Geometry` class evaluates the same quantities for every cluster
of a dataset at once using segment sums over the stacked observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np

from .errors import PreconditionError, ShapeError, SingularVarianceError
from .variance import VarianceFunction, floor_variances


@dataclass(frozen=True, eq=False)
class Cluster:
    id: Hashable
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Z.ndim == 1:
            Z = Z[:, None]
        if y.size < 1:
            raise ShapeError(f"cluster {self.id!r} is empty")
        if X.shape[0] != y.size or Z.shape[0] != y.size:
            raise ShapeError(
                f"cluster {self.id!r}: y has {y.size} rows, X {X.shape[0]}, Z {Z.shape[0]}"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Ordered clusters sharing covariate dimensions ``p`` and ``q``."""

    clusters: tuple[Cluster, ...]

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise ShapeError("dataset has no clusters")
        p, q = clusters[0].X.shape[1], clusters[0].Z.shape[1]
        for c in clusters:
            if c.X.shape[1] != p or c.Z.shape[1] != q:
                raise ShapeError(
                    f"cluster {c.id!r} has p={c.X.shape[1]}, q={c.Z.shape[1]}; expected p={p}, q={q}"
                )
        if len(clusters) < max(p, q):
            raise ShapeError(f"need at least max(p, q) = {max(p, q)} clusters, got {len(clusters)}")
        object.__setattr__(self, "clusters", clusters)

    @classmethod
    def _unchecked(cls, clusters) -> "ClusteredDataset":
        """Wrap clusters without the m >= max(p, q) check (single-area views)."""
        new = cls.__new__(cls)
        object.__setattr__(new, "clusters", tuple(clusters))
        return new

    @classmethod
    def from_arrays(cls, cluster_ids: Sequence, y, X, Z) -> "ClusteredDataset":
        """Group stacked rows by cluster label in order of first appearance."""
        y = np.asarray(y, dtype=float).reshape(-1)
        X = np.asarray(X, dtype=float)
        Z = np.asarray(Z, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Z.ndim == 1:
            Z = Z[:, None]
        ids = list(cluster_ids)
        if not (len(ids) == y.size == X.shape[0] == Z.shape[0]):
            raise ShapeError("cluster_ids, y, X and Z must have the same number of rows")
        rows: dict = {}
        for r, label in enumerate(ids):
            rows.setdefault(label, []).append(r)
        clusters = tuple(
            Cluster(label, y[idx], X[idx], Z[idx]) for label, idx in ((k, np.array(v)) for k, v in rows.items())
        )
        return cls(clusters)

    def with_y(self, y) -> "ClusteredDataset":
        """Same clusters and covariates with a new stacked response."""
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.N:
            raise ShapeError(f"expected {self.N} responses, got {y.size}")
        parts = np.split(y, self.starts[1:])
        new = ClusteredDataset.__new__(ClusteredDataset)
        object.__setattr__(
            new,
            "clusters",
            tuple(Cluster(c.id, yi, c.X, c.Z) for c, yi in zip(self.clusters, parts)),
        )
        # covariate-only caches carry over
        for name in ("X", "Z", "sizes", "starts", "index", "ids"):
            if name in self.__dict__:
                new.__dict__[name] = self.__dict__[name]
        new.__dict__["y"] = y
        return new

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return self.clusters[0].X.shape[1]

    @property
    def q(self) -> int:
        return self.clusters[0].Z.shape[1]

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def ids(self) -> list:
        return [c.id for c in self.clusters]

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([c.n for c in self.clusters])

    @cached_property
    def starts(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.sizes)[:-1]))

    @cached_property
    def index(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.sizes)

    @cached_property
    def y(self) -> np.ndarray:
        return np.concatenate([c.y for c in self.clusters])

    @cached_property
    def X(self) -> np.ndarray:
        return np.vstack([c.X for c in self.clusters])

    @cached_property
    def Z(self) -> np.ndarray:
        return np.vstack([c.Z for c in self.clusters])

    def segsum(self, a):
        """Per-cluster sums of the rows of ``a``."""
        return np.add.reduceat(a, self.starts, axis=0)

    def segmean(self, a):
        s = self.segsum(a)
        return s / (self.sizes if s.ndim == 1 else self.sizes.reshape((-1,) + (1,) * (s.ndim - 1)))

    def within(self, a):
        """Deviations of ``a`` from its cluster means."""
        return a - self.segmean(a)[self.index]

    def cluster_means_X(self) -> np.ndarray:
        return self.segmean(self.X)


@dataclass(frozen=True, eq=False)
class ModelParams:
    beta: np.ndarray
    gamma: np.ndarray
    tau2: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        object.__setattr__(self, "tau2", float(self.tau2))
        if not self.tau2 >= 0:
            raise ValueError(f"tau2 must be nonnegative, got {self.tau2}")

    def check(self, data: ClusteredDataset, vf: VarianceFunction) -> None:
        if self.beta.size != data.p:
            raise ShapeError(f"beta has length {self.beta.size}, data has p={data.p}")
        if self.gamma.size != data.q:
            raise ShapeError(f"gamma has length {self.gamma.size}, data has q={data.q}")
        vf.check(data.Z @ self.gamma, self.gamma)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma, [self.tau2]])


class Geometry:
    """Per-observation variances and per-cluster shrinkage for a whole dataset.

    Attributes (N = observations, m = clusters):
        s, d1, d2   variance function and derivatives, shape (N,)
        inv_s       1 / s
        S1          per-cluster sum of 1 / s, shape (m,)
        eta         1 + tau2 * S1
        lam         shrinkage weights tau2 / (s * eta), shape (N,)
        h           per-cluster sum of d1 * z / s^2, shape (m, q)
    """

    def __init__(self, params: ModelParams, data: ClusteredDataset, vf: VarianceFunction):
        s, d1, d2 = vf.evaluate(params.gamma, data.Z)
        s, self.floored = floor_variances(s)
        if not np.all(s > 0):
            raise SingularVarianceError("observation variance is not positive after flooring")
        self.data = data
        self.tau2 = params.tau2
        self.s, self.d1, self.d2 = s, d1, d2
        self.inv_s = 1.0 / s
        self.S1 = data.segsum(self.inv_s)
        self.eta = 1.0 + self.tau2 * self.S1
        self.lam = self.tau2 * self.inv_s / self.eta[data.index]
        self.h = data.segsum((d1 * self.inv_s**2)[:, None] * data.Z)

    def sigma_inv(self, A):
        """Row blocks Sigma_i^{-1} A_i stacked, for A of shape (N,) or (N, k)."""
        A = np.asarray(A, dtype=float)
        idx = self.data.index
        if A.ndim == 1:
            WA = self.inv_s * A
            return WA - self.lam * self.data.segsum(WA)[idx]
        WA = self.inv_s[:, None] * A
        return WA - self.lam[:, None] * self.data.segsum(WA)[idx]

    def sigma(self, A):
        """Row blocks Sigma_i A_i stacked."""
        A = np.asarray(A, dtype=float)
        if A.ndim == 1:
            return self.s * A + self.tau2 * self.data.segsum(A)[self.data.index]
        return self.s[:, None] * A + self.tau2 * self.data.segsum(A)[self.data.index]

    def delta(self) -> np.ndarray:
        """Per-observation vectors delta_ij of shape (N, q)."""
        idx = self.data.index
        t2 = self.tau2
        return t2**2 * self.h[idx] - (t2 * self.eta[idx] * self.inv_s * self.d1)[:, None] * self.data.Z


@dataclass(frozen=True, eq=False)
class ClusterGeometry:
    sigma2: np.ndarray
    W: np.ndarray
    Sigma: np.ndarray
    SigmaInv: np.ndarray
    eta: float
    lam: np.ndarray
    delta: np.ndarray
    floored: bool = field(default=False)


INVERSE_TOL = 1e-10


def cluster_geometry(params: ModelParams, cluster: Cluster, vf: VarianceFunction, *, reference=None) -> ClusterGeometry:
    """Dense covariance, closed-form inverse and shrinkage for one cluster.

    ``reference`` supplies the variances whose median sets the floor (the
    whole dataset, typically); defaults to the cluster's own variances.
    """
    if params.gamma.size != cluster.Z.shape[1]:
        raise ShapeError(f"gamma has length {params.gamma.size}, cluster has q={cluster.Z.shape[1]}")
    s, d1, _ = vf.evaluate(params.gamma, cluster.Z)
    s, floored = floor_variances(s, s if reference is None else reference)
    if not np.all(s > 0):
        raise SingularVarianceError(f"cluster {cluster.id!r}: variance not positive after flooring")
    t2 = params.tau2
    n = s.size
    inv_s = 1.0 / s
    eta = 1.0 + t2 * inv_s.sum()
    W = np.diag(s)
    Sigma = t2 * np.ones((n, n)) + W
    SigmaInv = np.diag(inv_s) - (t2 / eta) * np.outer(inv_s, inv_s)
    err = np.abs(Sigma @ SigmaInv - np.eye(n)).max()
    if err > INVERSE_TOL:
        raise SingularVarianceError(
            f"cluster {cluster.id!r}: closed-form inverse residual {err:.3g} exceeds {INVERSE_TOL}"
        )
    lam = t2 * inv_s / eta
    h = (d1 * inv_s**2) @ cluster.Z
    delta = t2**2 * h[None, :] - (t2 * eta * inv_s * d1)[:, None] * cluster.Z
    return ClusterGeometry(s, W, Sigma, SigmaInv, float(eta), lam, delta, floored)


def require_within_information(data: ClusteredDataset) -> None:
    if not np.any(data.sizes >= 2):
        raise PreconditionError("every cluster has a single observation; within-cluster moments vanish")
