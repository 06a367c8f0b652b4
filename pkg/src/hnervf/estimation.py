"""Three-stage moment estimation and its second-order asymptotics.

The pipeline follows a fixed order: the variance parameters gamma are found
from within-cluster squared residuals (which do not involve the random
effect), tau2 from the pooled second moment of the OLS residuals, and beta
by GLS with both plugged in.  On top of the point estimates this module
computes the per-cluster influence vectors, their outer-product covariance
Omega, the O(1/m) bias terms and the two kurtosis estimators used by the
MSE cross term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import variance as vfmod
from .errors import (
    ConstraintError,
    ConvergenceError,
    HnervfError,
    KurtosisUnidentifiedError,
    PreconditionError,
    RankError,
    ShapeError,
    SingularDesignError,
)
from .model import ClusteredDataset, Geometry, ModelParams, require_within_information
from .variance import VarianceFunction

Formulas = Literal["printed", "derived"]
KurtosisCoef = Literal["exact", "printed"]

_EPS = np.finfo(float).eps


@dataclass
class FitOptions:
    """Knobs for :func:`fit`.

    ``formulas`` picks between the bias and cross-term expressions in their
    original closed form (``"printed"``) and the versions re-derived from the Taylor
    expansions (``"derived"``); see the README for the differences.
    ``kurtosis_coef`` does the same for the fourth-moment coefficient of the
    within-cluster residuals.  ``kurtosis_truncation`` raises kurtosis
    estimates below 1 (impossible for any distribution) to 1.
    """

    gamma_init: str | np.ndarray = "auto"
    max_newton_iters: int = 50
    newton_tol: float = 1e-10
    tau2_truncation: bool = True
    formulas: Formulas = "derived"
    kurtosis_coef: KurtosisCoef = "exact"
    kurtosis_truncation: bool = True

    def __post_init__(self):
        if int(self.max_newton_iters) < 1:
            raise ValueError("max_newton_iters must be >= 1")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.formulas not in ("printed", "derived"):
            raise ValueError(f"formulas must be 'printed' or 'derived', got {self.formulas!r}")
        if self.kurtosis_coef not in ("exact", "printed"):
            raise ValueError(f"kurtosis_coef must be 'exact' or 'printed', got {self.kurtosis_coef!r}")


@dataclass
class InfluenceSet:
    psi_beta: np.ndarray  # (m, p)
    psi_gamma: np.ndarray  # (m, q)
    psi_tau: np.ndarray  # (m,)
    u1: np.ndarray  # (m,)
    u2: np.ndarray  # (m, q)
    T1: np.ndarray  # (q,)
    T2: np.ndarray  # (q, q)

    @property
    def stacked(self) -> np.ndarray:
        return np.column_stack([self.psi_beta, self.psi_gamma, self.psi_tau])


@dataclass
class OmegaMatrix:
    full: np.ndarray
    p: int
    q: int

    @property
    def _b(self):
        return slice(0, self.p)

    @property
    def _g(self):
        return slice(self.p, self.p + self.q)

    @property
    def bb(self):
        return self.full[self._b, self._b]

    @property
    def bg(self):
        return self.full[self._b, self._g]

    @property
    def bt(self):
        return self.full[self._b, -1]

    @property
    def gg(self):
        return self.full[self._g, self._g]

    @property
    def gt(self):
        return self.full[self._g, -1]

    @property
    def tt(self) -> float:
        return float(self.full[-1, -1])

    @classmethod
    def zeros(cls, p: int, q: int) -> "OmegaMatrix":
        return cls(np.zeros((p + q + 1, p + q + 1)), p, q)


@dataclass
class BiasTerms:
    b_beta: np.ndarray
    b_gamma: np.ndarray
    b_tau: float
    omega_bstar_gamma: np.ndarray  # (q, p): row s is Omega_{beta* gamma_s}
    omega_bstar_tau: np.ndarray  # (p,)

    @classmethod
    def zeros(cls, p: int, q: int) -> "BiasTerms":
        return cls(np.zeros(p), np.zeros(q), 0.0, np.zeros((q, p)), np.zeros(p))


@dataclass
class KurtosisEstimates:
    kappa_v: float
    kappa_eps: float
    truncated: bool = False


@dataclass
class FitResult:
    params: ModelParams
    vf: VarianceFunction
    options: FitOptions
    beta_ols: np.ndarray
    XtX_inv: np.ndarray
    tau2_raw: float
    tau2_truncated: bool
    newton_iterations: int
    newton_residual: float
    variance_floored: bool
    influence: InfluenceSet | None = None
    omega: OmegaMatrix | None = None
    bias: BiasTerms | None = None
    kurtosis: KurtosisEstimates | None = None
    kurtosis_note: str | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def beta(self):
        return self.params.beta

    @property
    def gamma(self):
        return self.params.gamma

    @property
    def tau2(self) -> float:
        return self.params.tau2


# ---------------------------------------------------------------- OLS


def ols_fit(data: ClusteredDataset):
    """Pooled OLS; returns (beta_ols, (X'X)^{-1})."""
    X = data.X
    p = X.shape[1]
    if np.linalg.matrix_rank(X) < p:
        col = next(j for j in range(p) if np.linalg.matrix_rank(X[:, : j + 1]) < j + 1)
        raise SingularDesignError(f"covariate column x{col + 1} is linearly dependent on earlier columns", col)
    XtX_inv = np.linalg.inv(X.T @ X)
    XtX_inv = 0.5 * (XtX_inv + XtX_inv.T)
    beta, *_ = np.linalg.lstsq(X, data.y, rcond=None)
    return beta, XtX_inv


# ---------------------------------------------------------------- gamma


class _GammaEquation:
    """Left side of the within-cluster estimating equation and its Jacobian."""

    def __init__(self, data: ClusteredDataset, beta: np.ndarray, vf: VarianceFunction):
        n = data.sizes[data.index].astype(float)
        Z = data.Z
        self.vf = vf
        self.Z = Z
        self.N = data.N
        self.r = data.within(data.y - data.X @ beta)
        # a_ij = z_ij - 2 z_ij / n_i + zbar_i / n_i; identically zero when n_i = 1
        self.a = Z * (1.0 - 2.0 / n)[:, None] + data.segmean(Z)[data.index] / n[:, None]
        self.target = (self.r**2) @ Z / self.N

    def value(self, gamma):
        s, _, _ = self.vf.evaluate(gamma, self.Z, check=False)
        return self.target - s @ self.a / self.N

    def jacobian(self, gamma):
        _, d1, _ = self.vf.evaluate(gamma, self.Z, check=False)
        return -(self.a * d1[:, None]).T @ self.Z / self.N

    def scale(self, gamma) -> float:
        s, _, _ = self.vf.evaluate(gamma, self.Z, check=False)
        return float(np.abs(self.target).max() + np.abs(s @ self.a / self.N).max())

    def admissible(self, gamma) -> bool:
        index = self.Z @ gamma
        return self.vf.domain_check(index, gamma) is None


def _initial_gamma(eq: _GammaEquation, data: ClusteredDataset, vf: VarianceFunction):
    keep = data.sizes[data.index] >= 2
    Z = eq.Z[keep]
    r = eq.r[keep]
    if vf.kind == "quadratic":
        g, *_ = np.linalg.lstsq(Z, np.abs(r), rcond=None)
        if g[0] < 0:
            g = -g
        if g[0] == 0:
            g[0] = 1e-3
        return g
    g, *_ = np.linalg.lstsq(Z, np.log(np.maximum(r**2, 1e-8)), rcond=None)
    return g


def solve_gamma(
    data: ClusteredDataset,
    beta_ols,
    vf: VarianceFunction,
    opts: FitOptions | None = None,
    *,
    return_info: bool = False,
):
    """Newton solve of the within-cluster moment equation for gamma.

    Steps are halved (up to 30 times) whenever a full step leaves the variance
    function's domain or fails to reduce the sup-norm of the equation.
    """
    opts = opts or FitOptions()
    vf = vfmod.get(vf)
    require_within_information(data)
    eq = _GammaEquation(data, np.asarray(beta_ols, dtype=float), vf)

    if isinstance(opts.gamma_init, str):
        if opts.gamma_init != "auto":
            raise ValueError(f"gamma_init must be 'auto' or a vector, got {opts.gamma_init!r}")
        gamma = _initial_gamma(eq, data, vf)
    else:
        gamma = np.asarray(opts.gamma_init, dtype=float).copy()
        if gamma.shape != (data.q,):
            raise ShapeError(f"gamma_init has shape {gamma.shape}, expected ({data.q},)")
    if not eq.admissible(gamma):
        raise ConstraintError(f"starting value {gamma} lies outside the variance function domain")

    F = eq.value(gamma)
    fn = float(np.abs(F).max())
    it = 0
    while fn > opts.newton_tol:
        if it >= opts.max_newton_iters:
            raise ConvergenceError(
                f"gamma equation not solved in {opts.max_newton_iters} Newton steps "
                f"(residual {fn:.3g})",
                last_iterate=gamma,
                residual=fn,
            )
        J = eq.jacobian(gamma)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1.0 / _EPS:
            raise RankError("Jacobian of the gamma equation is singular")
        step = np.linalg.solve(J, -F)
        it += 1
        t = 1.0
        for _ in range(31):
            cand = gamma + t * step
            if eq.admissible(cand):
                F_new = eq.value(cand)
                fn_new = float(np.abs(F_new).max())
                if fn_new < fn:
                    gamma, F, fn = cand, F_new, fn_new
                    break
            t *= 0.5
        else:
            # no halving improves: accept only if we sit at rounding level
            if fn <= 1e3 * _EPS * eq.scale(gamma):
                break
            raise ConvergenceError(
                f"step halving exhausted at Newton step {it} (residual {fn:.3g})",
                last_iterate=gamma,
                residual=fn,
            )
    # the tolerance bounds F, not gamma; one more quadratic step costs little
    J = eq.jacobian(gamma)
    if np.all(np.isfinite(J)) and np.linalg.cond(J) < 1.0 / _EPS:
        cand = gamma + np.linalg.solve(J, -F)
        if eq.admissible(cand):
            fn_new = float(np.abs(eq.value(cand)).max())
            if fn_new <= fn:
                gamma, fn = cand, fn_new
    if return_info:
        return gamma, {"iterations": it, "residual": fn}
    return gamma


# ---------------------------------------------------------------- tau2, beta


def estimate_tau2(
    data: ClusteredDataset,
    beta_ols,
    gamma_hat,
    vf: VarianceFunction,
    opts: FitOptions | None = None,
    *,
    return_raw: bool = False,
):
    """Moment estimator of the random-effect variance, truncated at zero."""
    opts = opts or FitOptions()
    vf = vfmod.get(vf)
    s, _, _ = vf.evaluate(gamma_hat, data.Z)
    e = data.y - data.X @ np.asarray(beta_ols, dtype=float)
    raw = float(np.mean(e**2 - s))
    tau2 = max(raw, 0.0) if opts.tau2_truncation else raw
    if return_raw:
        return tau2, raw
    return tau2


def _gls_normal(data: ClusteredDataset, geom: Geometry):
    Q = geom.sigma_inv(data.X)
    A = data.X.T @ Q
    A = 0.5 * (A + A.T)
    try:
        if np.linalg.cond(A) > 1.0 / _EPS:
            raise np.linalg.LinAlgError
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SingularDesignError("GLS normal matrix X' Sigma^{-1} X is singular") from None
    return Q, A, 0.5 * (A_inv + A_inv.T)


def gls_beta(data: ClusteredDataset, gamma_hat, tau2_hat: float, vf: VarianceFunction, *, geometry: Geometry | None = None):
    """Feasible GLS estimate of beta with the closed-form cluster inverses."""
    vf = vfmod.get(vf)
    if tau2_hat < 0:
        raise ValueError("GLS requires a nonnegative tau2")
    if geometry is None:
        geometry = Geometry(ModelParams(np.zeros(data.p), gamma_hat, tau2_hat), data, vf)
    Q, _, A_inv = _gls_normal(data, geometry)
    return A_inv @ (Q.T @ data.y)


# ---------------------------------------------------------------- influence


def influence_and_omega(data: ClusteredDataset, params: ModelParams, vf: VarianceFunction, *, geometry: Geometry | None = None):
    """Plug-in influence vectors of (beta, gamma, tau2) and their Omega."""
    vf = vfmod.get(vf)
    geom = geometry or Geometry(params, data, vf)
    m, N = data.m, data.N
    Z = data.Z
    n = data.sizes[data.index].astype(float)
    e = data.y - data.X @ params.beta
    r = data.within(e)
    a = Z * (1.0 - 2.0 / n)[:, None] + data.segmean(Z)[data.index] / n[:, None]

    u1 = (m / N) * data.segsum(e**2 - geom.s - params.tau2)
    u2 = (m / N) * data.segsum((r**2)[:, None] * Z - geom.s[:, None] * a)
    T1 = geom.d1 @ Z
    T2_inv = (a * geom.d1[:, None]).T @ Z
    if np.linalg.cond(T2_inv) > 1.0 / _EPS:
        raise RankError("sum of d1 * a z' is singular; gamma is not identified")
    T2 = np.linalg.inv(T2_inv)

    psi_gamma = N * u2 @ T2.T
    psi_tau = u1 - (u2 @ T2.T) @ T1
    Q, _, A_inv = _gls_normal(data, geom)
    psi_beta = m * data.segsum(Q * e[:, None]) @ A_inv

    inf = InfluenceSet(psi_beta, psi_gamma, psi_tau, u1, u2, T1, T2)
    Psi = inf.stacked
    full = Psi.T @ Psi / m**2
    full = 0.5 * (full + full.T)
    return inf, OmegaMatrix(full, data.p, data.q)


# ---------------------------------------------------------------- bias


def bias_terms(
    data: ClusteredDataset,
    params: ModelParams,
    omega: OmegaMatrix,
    vf: VarianceFunction,
    *,
    influence: InfluenceSet | None = None,
    XtX_inv=None,
    formulas: Formulas = "derived",
    geometry: Geometry | None = None,
) -> BiasTerms:
    """Second-order (O(1/m)) biases of beta-hat, gamma-hat and tau2-hat."""
    vf = vfmod.get(vf)
    geom = geometry or Geometry(params, data, vf)
    if influence is None:
        influence, _ = influence_and_omega(data, params, vf, geometry=geom)
    if XtX_inv is None:
        _, XtX_inv = ols_fit(data)
    m, N, p, q = data.m, data.N, data.p, data.q
    X, Z = data.X, data.Z
    n = data.sizes[data.index].astype(float)
    a = Z * (1.0 - 2.0 / n)[:, None] + data.segmean(Z)[data.index] / n[:, None]
    T1, T2 = influence.T1, influence.T2
    Ogg = omega.gg

    # OLS sandwich V = (X'X)^{-1} X' Sigma X (X'X)^{-1}
    XtSX = X.T @ geom.sigma(X)
    V = XtX_inv @ XtSX @ XtX_inv
    Xw = data.within(X)
    SXw = data.within(geom.s[:, None] * X)  # E_k Sigma_k X_k
    qa = np.einsum("ij,jk,ik->i", Xw, V, Xw)
    qb = np.einsum("ij,jk,ik->i", Xw, XtX_inv, SXw)
    tr_A = Z.T @ qa
    tr_B = Z.T @ qb
    zOz = np.einsum("ij,jk,ik->i", Z, Ogg, Z)
    if formulas == "printed":
        aOz = np.einsum("ij,jk,ik->i", a, Ogg, Z)
        curv = Z.T @ (geom.d2 * aOz)
        b_gamma = T2 @ (2.0 * (tr_A - tr_B) - curv)
    else:
        curv = a.T @ (geom.d2 * zOz)
        b_gamma = T2 @ (tr_A - 2.0 * tr_B - 0.5 * curv)

    b_tau = (
        -(T1 @ b_gamma) / N
        - 2.0 / N * np.trace(XtX_inv @ XtSX)
        - 0.5 / N * float(geom.d2 @ zOz)
        + np.trace(X.T @ X @ V) / N
    )

    # beta: derivative of GLS in gamma_s and tau2 through auxiliary GLS fits
    Q, _, A_inv = _gls_normal(data, geom)
    e = data.y - X @ params.beta
    Omega_bg = omega.bg
    correction = np.zeros(p)
    om_star_g = np.zeros((q, p))
    for s in range(q):
        w = geom.d1 * Z[:, s]
        G = Q.T @ (w[:, None] * Q)
        try:
            G_inv = np.linalg.inv(G)
        except np.linalg.LinAlgError:
            raise RankError(f"auxiliary GLS matrix for gamma_{s + 1} is singular") from None
        psi_star = m * data.segsum(Q * (w * e)[:, None]) @ G_inv.T
        om_star_g[s] = psi_star.T @ influence.psi_gamma[:, s] / m**2
        correction += G @ (om_star_g[s] - Omega_bg[:, s])
    Qs = data.segsum(Q)
    G_tau = Qs.T @ Qs
    try:
        G_tau_inv = np.linalg.inv(G_tau)
    except np.linalg.LinAlgError:
        raise RankError("auxiliary GLS matrix for tau2 is singular") from None
    psi_star_tau = m * (Qs * data.segsum(e)[:, None]) @ G_tau_inv.T
    om_star_t = psi_star_tau.T @ influence.psi_tau / m**2
    correction += G_tau @ (om_star_t - omega.bt)
    b_beta = A_inv @ correction
    if formulas == "derived":
        b_beta = -b_beta
    return BiasTerms(b_beta, b_gamma, float(b_tau), om_star_g, om_star_t)


# ---------------------------------------------------------------- kurtosis


def _kurtosis_coefficient(n, which: KurtosisCoef):
    n = np.asarray(n, dtype=float)
    if which == "printed":
        return (n - 1) * (n - 2) * (n**2 - n - 1) / n**4
    return (n - 1) * (n**2 - 3 * n + 3) / n**3


def estimate_kurtosis(
    data: ClusteredDataset,
    params: ModelParams,
    beta_ols=None,
    vf: VarianceFunction | str = "exponential",
    *,
    coef: KurtosisCoef = "exact",
    truncate: bool = True,
    geometry: Geometry | None = None,
) -> KurtosisEstimates:
    """Fourth-moment estimators of the error and random-effect kurtosis.

    ``params.beta`` (GLS) drives the within-cluster residuals; the pooled
    residuals use ``beta_ols`` as in the tau2 moment equation.  With
    ``coef="exact"`` pairs contribute to the error kurtosis too, but at least
    one cluster of three or more observations is still required.
    """
    vf = vfmod.get(vf)
    n = data.sizes.astype(float)
    if not np.any(n >= 3):
        raise KurtosisUnidentifiedError(
            "error kurtosis needs at least one cluster with three or more observations"
        )
    geom = geometry or Geometry(params, data, vf)
    coef_n = _kurtosis_coefficient(n, coef)
    s = geom.s
    S2 = data.segsum(s)
    S4 = data.segsum(s**2)
    n_star = float(coef_n @ S4)
    if not n_star > 0:
        raise KurtosisUnidentifiedError(
            "no cluster is large enough to identify the error kurtosis"
        )
    r = data.within(data.y - data.X @ params.beta)
    num = data.segsum(r**4) - 3.0 * (2 * n - 3) / n**3 * (S2**2 - S4)
    kappa_eps = float(num.sum() / n_star)
    # E[x^4] >= E[x^2]^2, so any kurtosis is at least one
    eps_cut = truncate and kappa_eps < 1.0
    if eps_cut:
        kappa_eps = 1.0

    t2 = params.tau2
    if not t2 > 0:
        raise KurtosisUnidentifiedError("random-effect kurtosis undefined when tau2 = 0")
    if beta_ols is None:
        beta_ols, _ = ols_fit(data)
    e = data.y - data.X @ np.asarray(beta_ols, dtype=float)
    kappa_v = float(np.sum(e**4 - 6 * t2 * s - kappa_eps * s**2) / (data.N * t2**2))
    v_cut = truncate and kappa_v < 1.0
    if v_cut:
        kappa_v = 1.0
    return KurtosisEstimates(kappa_v, kappa_eps, eps_cut or v_cut)


# ---------------------------------------------------------------- pipeline


def fit(
    data: ClusteredDataset,
    vf: VarianceFunction | str = "exponential",
    opts: FitOptions | None = None,
    *,
    diagnostics: bool = True,
) -> FitResult:
    """Estimate (beta, gamma, tau2) and, with ``diagnostics``, Omega, biases and kurtosis."""
    opts = opts or FitOptions()
    vf = vfmod.get(vf)
    if not isinstance(opts.gamma_init, str) and np.size(opts.gamma_init) != data.q:
        raise ShapeError(f"gamma_init has {np.size(opts.gamma_init)} entries but Z has {data.q} columns")

    stage = "ols"
    try:
        beta_ols, XtX_inv = ols_fit(data)
        stage = "gamma"
        gamma, info = solve_gamma(data, beta_ols, vf, opts, return_info=True)
        stage = "tau2"
        tau2, raw = estimate_tau2(data, beta_ols, gamma, vf, opts, return_raw=True)
        if tau2 < 0:
            raise ConstraintError(
                f"moment estimate of tau2 is negative ({raw:.4g}) and truncation is disabled"
            )
        stage = "beta"
        geom = Geometry(ModelParams(np.zeros(data.p), gamma, max(tau2, 0.0)), data, vf)
        beta = gls_beta(data, gamma, tau2, vf, geometry=geom)
    except HnervfError as exc:
        exc.stage = stage
        raise

    params = ModelParams(beta, gamma, tau2)
    result = FitResult(
        params=params,
        vf=vf,
        options=opts,
        beta_ols=beta_ols,
        XtX_inv=XtX_inv,
        tau2_raw=raw,
        tau2_truncated=raw < 0 and opts.tau2_truncation,
        newton_iterations=info["iterations"],
        newton_residual=info["residual"],
        variance_floored=geom.floored,
    )
    if result.tau2_truncated:
        result.flags.append("tau2_truncated")
    if geom.floored:
        result.flags.append("variance_floored")
    if not diagnostics:
        return result

    try:
        stage = "influence"
        result.influence, result.omega = influence_and_omega(data, params, vf, geometry=geom)
        stage = "bias"
        result.bias = bias_terms(
            data, params, result.omega, vf,
            influence=result.influence, XtX_inv=XtX_inv, formulas=opts.formulas, geometry=geom,
        )
    except HnervfError as exc:
        exc.stage = stage
        raise
    try:
        result.kurtosis = estimate_kurtosis(
            data, params, beta_ols, vf,
            coef=opts.kurtosis_coef, truncate=opts.kurtosis_truncation, geometry=geom,
        )
        if result.kurtosis.truncated:
            result.flags.append("kurtosis_truncated")
    except KurtosisUnidentifiedError as exc:
        result.kurtosis_note = str(exc)
        result.flags.append("kurtosis_unidentified")
    return result


def prasad_rao_check(data: ClusteredDataset):  # pragma: no cover - convenience for demos
    """Homoscedastic fit (Z = 1, exponential) returning (delta2, tau2)."""
    ones = ClusteredDataset(
        tuple(type(c)(c.id, c.y, c.X, np.ones((c.n, 1))) for c in data.clusters)
    )
    res = fit(ones, "exponential", diagnostics=False)
    return float(np.exp(res.gamma[0])), res.tau2


__all__ = [
    "FitOptions",
    "FitResult",
    "InfluenceSet",
    "OmegaMatrix",
    "BiasTerms",
    "KurtosisEstimates",
    "ols_fit",
    "solve_gamma",
    "estimate_tau2",
    "gls_beta",
    "fit",
    "influence_and_omega",
    "bias_terms",
    "estimate_kurtosis",
    "PreconditionError",
]
