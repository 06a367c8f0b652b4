"""EBLUP of area means and its second-order mean squared error.

For an area i the target is mu_i = c_i'beta + v_i (by default c_i is the
cluster mean of the covariates).  The MSE of the EBLUP is approximated as

    R1 + R2 + 2 R31

where R1 = tau2 / eta_i is the BLUP risk, R2 the cost of estimating theta and
R31 a cross term that vanishes under normal kurtosis.  The estimator of the
MSE plugs in the fitted parameters and removes the O(1/m) bias B_i of the
plug-in R1.

Every function here works on a whole dataset at once; the single-cluster
entry points wrap one cluster as a one-area dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import variance as vfmod
from .errors import RankError, ShapeError
from .estimation import BiasTerms, FitResult, Formulas, KurtosisEstimates, OmegaMatrix
from .model import Cluster, ClusteredDataset, Geometry, ModelParams
from .variance import VarianceFunction

NORMAL_KURTOSIS = KurtosisEstimates(3.0, 3.0)

THIRD_MOMENT_NOTE = (
    "cross term assumes zero third moments of the random effect and the errors"
)


@dataclass(frozen=True, eq=False)
class PredictionTarget:
    cluster_id: Hashable
    c: np.ndarray | None = None

    def vector(self, cluster: Cluster) -> np.ndarray:
        if self.c is None:
            return cluster.X.mean(axis=0)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if c.size != cluster.X.shape[1]:
            raise ShapeError(f"target for {self.cluster_id!r} has length {c.size}, expected {cluster.X.shape[1]}")
        return c


@dataclass(frozen=True, eq=False)
class DatasetAggregates:
    """Whole-dataset quantities the cross term needs."""

    m: int
    N: int
    T1: np.ndarray
    T2: np.ndarray
    K: np.ndarray  # (sum d1 z z')^{-1}


@dataclass
class MseReport:
    ids: list
    n: np.ndarray
    sample_mean: np.ndarray
    eblup: np.ndarray
    r1_plugin: np.ndarray
    r1_bias: np.ndarray
    r1_corrected: np.ndarray
    r2: np.ndarray
    r31: np.ndarray
    mse_estimate: np.ndarray
    naive_estimate: np.ndarray
    dif: np.ndarray
    clipped: np.ndarray
    flags: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=lambda: [THIRD_MOMENT_NOTE])

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def smse(self) -> np.ndarray:
        return np.sqrt(self.mse_estimate)

    @property
    def naive_smse(self) -> np.ndarray:
        return np.sqrt(self.naive_estimate)

    def row(self, i: int) -> dict:
        keys = (
            "n", "sample_mean", "eblup", "r1_plugin", "r1_bias", "r1_corrected",
            "r2", "r31", "mse_estimate", "naive_estimate", "dif", "clipped",
        )
        out = {"id": self.ids[i]}
        out.update({k: getattr(self, k)[i].item() for k in keys})
        return out


# ---------------------------------------------------------------- helpers


def _single(cluster: Cluster) -> ClusteredDataset:
    return ClusteredDataset._unchecked((cluster,))


def _targets(data: ClusteredDataset, targets) -> np.ndarray:
    """Stack target vectors c_i in cluster order (m, p)."""
    C = data.segmean(data.X)
    if targets is None:
        return C
    if isinstance(targets, np.ndarray) and targets.ndim == 2:
        if targets.shape != C.shape:
            raise ShapeError(f"targets have shape {targets.shape}, expected {C.shape}")
        return targets.astype(float)
    if isinstance(targets, PredictionTarget):
        targets = [targets]
    pos = {cid: k for k, cid in enumerate(data.ids)}
    C = C.copy()
    for t in targets:
        if t.cluster_id not in pos:
            raise KeyError(f"unknown cluster id {t.cluster_id!r}")
        k = pos[t.cluster_id]
        C[k] = t.vector(data.clusters[k])
    return C


def _target_vector(cluster: Cluster, target) -> np.ndarray:
    if target is None:
        return cluster.X.mean(axis=0)
    if isinstance(target, PredictionTarget):
        return target.vector(cluster)
    return PredictionTarget(cluster.id, target).vector(cluster)


def _a_weights(data: ClusteredDataset) -> np.ndarray:
    n = data.sizes[data.index].astype(float)
    return data.Z * (1.0 - 2.0 / n)[:, None] + data.segmean(data.Z)[data.index] / n[:, None]


def dataset_aggregates(data: ClusteredDataset, params: ModelParams, vf) -> DatasetAggregates:
    vf = vfmod.get(vf)
    _, d1, _ = vf.evaluate(params.gamma, data.Z)
    T1 = d1 @ data.Z
    T2_inv = (_a_weights(data) * d1[:, None]).T @ data.Z
    K_inv = (data.Z * d1[:, None]).T @ data.Z
    eps = np.finfo(float).eps
    if np.linalg.cond(T2_inv) > 1 / eps or np.linalg.cond(K_inv) > 1 / eps:
        raise RankError("sum of d1 z z' is singular")
    return DatasetAggregates(data.m, data.N, T1, np.linalg.inv(T2_inv), np.linalg.inv(K_inv))


# ---------------------------------------------------------------- vectorized core


def _blup(geom: Geometry, data: ClusteredDataset, beta, C) -> np.ndarray:
    resid = data.y - data.X @ beta
    return C @ beta + data.segsum(geom.lam * resid)


def _r1(geom: Geometry) -> np.ndarray:
    return geom.tau2 / geom.eta


def _r2(geom: Geometry, data: ClusteredDataset, omega: OmegaMatrix, C) -> np.ndarray:
    t2, eta = geom.tau2, geom.eta
    Ogg, Ogt, Ott = omega.gg, omega.gt, omega.tt
    sum_sd = -t2 * geom.h  # sum_j delta_ij / sigma_ij^2
    delta = geom.delta()
    quad = data.segsum(geom.inv_s * np.einsum("ij,jk,ik->i", delta, Ogg, delta))
    g = C - data.segsum(geom.lam[:, None] * data.X)
    return (
        t2 * np.einsum("ij,jk,ik->i", sum_sd, Ogg, sum_sd) / eta**4
        + quad / eta**4
        + 2.0 * (sum_sd @ Ogt) / eta**3
        + geom.S1 * Ott / eta**3
        + np.einsum("ij,jk,ik->i", g, omega.bb, g)
    )


def _r31(geom: Geometry, data: ClusteredDataset, kappa: KurtosisEstimates, agg: DatasetAggregates, formulas: Formulas):
    t2, eta = geom.tau2, geom.eta
    idx = data.index
    m, N = agg.m, agg.N
    n = data.sizes[idx].astype(float)
    kv, ke = kappa.kappa_v, kappa.kappa_eps
    base = (m / N) * t2 / eta[idx]
    M1 = base * (n * t2 * (3.0 - kv) + geom.s * (ke - 3.0))
    if formulas == "printed":
        M2 = (base * (n - 1) ** 2 / n**2 * (ke - 3.0) * geom.s)[:, None] * data.Z
        K = agg.K
    else:
        M2 = (base * (ke - 3.0) * geom.s)[:, None] * _a_weights(data)
        K = (N / m) * agg.T2
    delta = geom.delta()
    first = data.segsum(geom.inv_s * np.einsum("ij,jk,ik->i", delta, K, M2))
    second = data.segsum(geom.inv_s * (M1 - M2 @ (agg.T2.T @ agg.T1)))
    return (first + second / m) / eta**2


def _b(geom: Geometry, data: ClusteredDataset, omega: OmegaMatrix, bias: BiasTerms) -> np.ndarray:
    """Second-order bias B_i of the plug-in R1; zero on the tau2 = 0 boundary."""
    t2, eta = geom.tau2, geom.eta
    if t2 == 0:
        return np.zeros(data.m)
    Ogg = omega.gg
    eta1 = -t2 * geom.h
    w = (2.0 * geom.inv_s * geom.d1**2 - geom.d2) * geom.inv_s**2
    # tr(eta2 Ogg) = tau2 * sum_j w_j z_j' Ogg z_j
    tr_eta2 = t2 * data.segsum(w * np.einsum("ij,jk,ik->i", data.Z, Ogg, data.Z))
    return (
        -t2 * (eta1 @ bias.b_gamma) / eta**2
        + bias.b_tau / eta**2
        - 2.0 * (eta1 @ omega.gt) / eta**3
        # tau^{-2}(eta^{-3} - eta^{-2}) = -S1 / eta^3
        - geom.S1 * omega.tt / eta**3
        + t2 * (np.einsum("ij,jk,ik->i", eta1, Ogg, eta1) - 0.5 * eta * tr_eta2) / eta**3
    )


# ---------------------------------------------------------------- single-area API


def blup(params: ModelParams, cluster: Cluster, target=None, vf="exponential") -> float:
    """BLUP c'beta + sum_j lambda_ij (y_ij - x_ij'beta) at known parameters."""
    vf = vfmod.get(vf)
    data = _single(cluster)
    geom = Geometry(params, data, vf)
    c = _target_vector(cluster, target)[None, :]
    return float(_blup(geom, data, params.beta, c)[0])


def eblup(fit: FitResult, cluster: Cluster, target=None, vf=None) -> float:
    return blup(fit.params, cluster, target, vf or fit.vf)


def mse_first_order(params: ModelParams, cluster: Cluster, vf="exponential") -> float:
    geom = Geometry(params, _single(cluster), vfmod.get(vf))
    return float(_r1(geom)[0])


def mse_second_order(params: ModelParams, omega: OmegaMatrix, cluster: Cluster, target=None, vf="exponential") -> float:
    data = _single(cluster)
    geom = Geometry(params, data, vfmod.get(vf))
    c = _target_vector(cluster, target)[None, :]
    return float(_r2(geom, data, omega, c)[0])


def mse_cross_term(
    params: ModelParams,
    kappa: KurtosisEstimates,
    cluster: Cluster,
    aggregates: DatasetAggregates,
    vf="exponential",
    *,
    formulas: Formulas = "derived",
) -> float:
    data = _single(cluster)
    geom = Geometry(params, data, vfmod.get(vf))
    return float(_r31(geom, data, kappa, aggregates, formulas)[0])


def r1_bias_correction(params: ModelParams, omega: OmegaMatrix, bias: BiasTerms, cluster: Cluster, vf="exponential"):
    """Return (B_i, R1 - B_i) for one area."""
    geom = Geometry(params, _single(cluster), vfmod.get(vf))
    b = float(_b(geom, _single(cluster), omega, bias)[0])
    return b, float(_r1(geom)[0]) - b


def mse_estimate(fit: FitResult, cluster: Cluster, target=None, vf=None, *, data: ClusteredDataset | None = None) -> dict:
    """One MSE report row; ``data`` (the fitted dataset) supplies the cross-term aggregates."""
    if data is None:
        raise ValueError("mse_estimate needs the fitted dataset for its aggregates")
    pos = [k for k, c in enumerate(data.clusters) if c is cluster or c.id == cluster.id]
    if not pos:
        raise KeyError(f"cluster {cluster.id!r} is not part of the fitted dataset")
    C = _targets(data, None)
    C[pos[0]] = _target_vector(cluster, target)
    report = mse_report(fit, data, C, vf=vf)
    row = report.row(pos[0])
    row["flags"] = list(report.flags)
    return row


# ---------------------------------------------------------------- report


def mse_report(
    fit: FitResult,
    data: ClusteredDataset,
    targets: Sequence[PredictionTarget] | np.ndarray | None = None,
    *,
    vf=None,
    formulas: Formulas | None = None,
) -> MseReport:
    """EBLUPs and MSE estimates for every area of the fitted dataset."""
    vf = vfmod.get(vf or fit.vf)
    if fit.omega is None or fit.bias is None:
        raise ValueError("MSE estimation needs a fit run with diagnostics=True")
    formulas = formulas or fit.options.formulas
    params = fit.params
    geom = Geometry(params, data, vf)
    C = _targets(data, targets)
    flags: list[str] = []

    kappa = fit.kurtosis
    if kappa is None:
        kappa = NORMAL_KURTOSIS
        flags.append("kurtosis_fallback")
    agg = DatasetAggregates(data.m, data.N, fit.influence.T1, fit.influence.T2, _k_matrix(data, geom))

    mu = _blup(geom, data, params.beta, C)
    r1 = _r1(geom)
    b = _b(geom, data, fit.omega, fit.bias)
    r2 = _r2(geom, data, fit.omega, C)
    r31 = _r31(geom, data, kappa, agg, formulas)
    r1c = r1 - b
    mse = r1c + r2 + 2.0 * r31
    clipped = mse < 0
    if clipped.any():
        mse = np.where(clipped, 0.0, mse)
        flags.append("mse_clipped")
    if params.tau2 == 0:
        flags.append("degenerate_fit_b_zero")
    if kappa.truncated:
        flags.append("kurtosis_truncated")
    if geom.floored:
        flags.append("variance_floored")
    ybar = data.segmean(data.y)
    return MseReport(
        ids=list(data.ids),
        n=data.sizes.copy(),
        sample_mean=ybar,
        eblup=mu,
        r1_plugin=r1,
        r1_bias=b,
        r1_corrected=r1c,
        r2=r2,
        r31=r31,
        mse_estimate=mse,
        naive_estimate=r1.copy(),
        dif=np.abs(ybar - mu),
        clipped=clipped,
        flags=flags,
    )


def _k_matrix(data: ClusteredDataset, geom: Geometry) -> np.ndarray:
    K_inv = (data.Z * geom.d1[:, None]).T @ data.Z
    if np.linalg.cond(K_inv) > 1 / np.finfo(float).eps:
        raise RankError("sum of d1 z z' is singular")
    return np.linalg.inv(K_inv)


def eblups(fit: FitResult, data: ClusteredDataset, targets=None) -> np.ndarray:
    """EBLUPs only (no MSE machinery); used inside simulation loops."""
    geom = Geometry(fit.params, data, fit.vf)
    return _blup(geom, data, fit.params.beta, _targets(data, targets))


def naive_mse(fit: FitResult, data: ClusteredDataset) -> np.ndarray:
    return _r1(Geometry(fit.params, data, fit.vf))
