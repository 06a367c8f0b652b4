"""Monte Carlo studies of the EBLUP and its MSE estimator.

Data follow y_ij = b0 + b1 x_ij + v_i + e_ij with Var(v) = tau^2 and
Var(e_ij) = exp(g0 + g1 z_ij).  Covariates are drawn once from the master
seed and held fixed; the random effects and errors of replication r come from
a stream keyed by (seed, stage, r), so results do not depend on how the
replications are split across workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property, partial

import numpy as np

from . import estimation
from .errors import HnervfError, RegistryError, StudyFailureError
from .estimation import FitOptions
from .model import ClusteredDataset, ModelParams
from .prediction import eblups, mse_report, naive_mse

DISTRIBUTIONS = ("M1", "M2", "M3", "M4", "M5")
MAX_FAILURE_RATE = 0.01

# stage tags for the replication streams
_STAGE_MSE = 1
_STAGE_EST = 2
_STAGE_EBLUP = 3


def _standard_draws(kind: str, rng: np.random.Generator, size, negate: bool = False) -> np.ndarray:
    """Mean-zero, unit-variance draws of the given distribution kind."""
    if kind == "M1":
        return rng.standard_normal(size)
    if kind == "M2":
        return rng.standard_t(6, size) / np.sqrt(1.5)
    if kind in ("M3", "M4"):
        x = (rng.chisquare(5, size) - 5.0) / np.sqrt(10.0)
        return -x if (kind == "M4" and negate) else x
    if kind == "M5":
        return rng.logistic(0.0, np.sqrt(3.0) / np.pi, size)
    raise RegistryError(f"unknown distribution kind {kind!r}; known: {DISTRIBUTIONS}")


def sample_effect(kind: str, target_variance, stream: np.random.Generator, size=None, *, error: bool = False):
    """Mean-zero draws with variance ``target_variance``.

    ``error=True`` marks draws of the observation errors; under M4 those are
    reflected (negative chi-squared shape) while random effects are not.
    """
    v = np.asarray(target_variance, dtype=float)
    if np.any(~(v > 0)):
        raise ValueError("target variance must be positive")
    if size is None:
        size = v.shape
    out = _standard_draws(kind, stream, size, negate=error) * np.sqrt(v)
    return out.item() if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class DgpConfig:
    m: int = 20
    sizes: tuple[int, ...] | int = 8
    beta: tuple[float, float] = (1.0, 0.8)
    tau: float = 1.2
    gamma: tuple[float, float] = (1.0, -0.4)
    x_range: tuple[float, float] = (0.0, 2.0)
    z_range: tuple[float, float] = (0.0, 5.0)
    distribution: str = "M1"
    seed: int = 20240601

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise RegistryError(f"unknown distribution kind {self.distribution!r}; known: {DISTRIBUTIONS}")
        if isinstance(self.sizes, int):
            object.__setattr__(self, "sizes", (self.sizes,) * self.m)
        else:
            object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if len(self.sizes) != self.m or min(self.sizes) < 1:
            raise ValueError("sizes must give a positive sample size for each of the m areas")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @cached_property
    def design(self) -> ClusteredDataset:
        """Fixed covariates with a zero response."""
        rng = np.random.default_rng([self.seed, 0])
        N = sum(self.sizes)
        x = rng.uniform(*self.x_range, N)
        z = rng.uniform(*self.z_range, N)
        X = np.column_stack([np.ones(N), x])
        Z = np.column_stack([np.ones(N), z])
        ids = np.repeat(np.arange(1, self.m + 1), self.sizes)
        data = ClusteredDataset.from_arrays(ids, np.zeros(N), X, Z)
        data.X, data.Z, data.index  # warm the shared caches
        return data

    @cached_property
    def error_variances(self) -> np.ndarray:
        return np.exp(self.design.Z @ np.asarray(self.gamma))

    @property
    def params(self) -> ModelParams:
        return ModelParams(np.asarray(self.beta), np.asarray(self.gamma), self.tau**2)

    def with_(self, **changes) -> "DgpConfig":
        return replace(self, **changes)


def grouped_sizes(groups: int = 4, per_group: int = 5, offset: int = 3) -> tuple[int, ...]:
    """Area sizes n_G = G + offset for ``groups`` blocks of ``per_group`` areas."""
    return tuple(g + offset for g in range(1, groups + 1) for _ in range(per_group))


def preset(name: str, **overrides) -> DgpConfig:
    """Named designs: ``fig1`` (heteroscedastic), ``fig2`` (homoscedastic), ``table1``."""
    if name == "fig1":
        cfg = DgpConfig(m=20, sizes=8, gamma=(1.0, -0.4))
    elif name == "fig2":
        cfg = DgpConfig(m=20, sizes=8, gamma=(1.0, 0.0))
    elif name == "table1":
        cfg = DgpConfig(m=20, sizes=grouped_sizes(), gamma=(1.0, -0.4))
    else:
        raise RegistryError(f"unknown preset {name!r}; known: fig1, fig2, table1")
    return cfg.with_(**overrides) if overrides else cfg


def generate_dgp(config: DgpConfig, replication_index: int, *, stage: int = _STAGE_EBLUP):
    """One replication: (dataset, true area means, true parameters)."""
    design = config.design
    rng = np.random.default_rng([config.seed, stage, int(replication_index)])
    v = sample_effect(config.distribution, config.tau**2, rng, config.m)
    e = sample_effect(config.distribution, config.error_variances, rng, error=True)
    beta = np.asarray(config.beta)
    y = design.X @ beta + v[design.index] + e
    mu = design.segmean(design.X) @ beta + v
    return design.with_y(y), mu, config.params


def _homoscedastic(data: ClusteredDataset) -> ClusteredDataset:
    from .model import Cluster

    clusters = tuple(Cluster(c.id, c.y, c.X, np.ones((c.n, 1))) for c in data.clusters)
    return ClusteredDataset(clusters)


def fit_ner_baseline(data: ClusteredDataset, opts: FitOptions | None = None):
    """Homoscedastic nested error fit: (params, EBLUPs, naive R1 per area)."""
    ner_data = _homoscedastic(data)
    fit = estimation.fit(ner_data, "exponential", opts, diagnostics=False)
    return fit.params, eblups(fit, ner_data), naive_mse(fit, ner_data)


# ---------------------------------------------------------------- workers


def _workers() -> int:
    env = os.environ.get("HNERVF_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(os.cpu_count() or 1, 8))


def _map(fn, items, workers: int | None = None, chunk: int = 50):
    """Ordered map; replications are keyed, so chunking never changes results."""
    workers = _workers() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) < 2 * chunk:
        return [fn(i) for i in items]
    blocks = [items[k : k + chunk] for k in range(0, len(items), chunk)]
    with ProcessPoolExecutor(workers) as ex:
        out = []
        for res in ex.map(partial(_run_block, fn), blocks):
            out.extend(res)
        return out


def _run_block(fn, block):
    return [fn(i) for i in block]


def _check_failures(failures: int, total: int, what: str):
    if total and failures / total > MAX_FAILURE_RATE:
        raise StudyFailureError(
            f"{what}: {failures} of {total} replications failed (limit {MAX_FAILURE_RATE:.0%})"
        )


def _eblup_rep(config: DgpConfig, opts: FitOptions, r: int):
    data, mu, _ = generate_dgp(config, r, stage=_STAGE_EBLUP)
    try:
        fit = estimation.fit(data, "exponential", opts, diagnostics=False)
        hv = eblups(fit, data) - mu
    except HnervfError:
        hv = None
    try:
        _, ner_mu, _ = fit_ner_baseline(data, opts)
        nr = ner_mu - mu
    except HnervfError:
        nr = None
    return hv, nr


def _mse_rep(config: DgpConfig, opts: FitOptions, r: int):
    data, mu, _ = generate_dgp(config, r, stage=_STAGE_MSE)
    try:
        fit = estimation.fit(data, "exponential", opts, diagnostics=False)
        return eblups(fit, data) - mu
    except HnervfError:
        return None


def _est_rep(config: DgpConfig, opts: FitOptions, r: int):
    data, _, _ = generate_dgp(config, r, stage=_STAGE_EST)
    try:
        fit = estimation.fit(data, "exponential", opts)
        rep = mse_report(fit, data)
        return rep.mse_estimate, rep.naive_estimate
    except HnervfError:
        return None


# ---------------------------------------------------------------- studies


@dataclass
class StudyResult:
    config: dict
    replications: int
    failures: dict
    area_ids: list
    sizes: np.ndarray
    mse_hnervf: np.ndarray | None = None
    mse_ner: np.ndarray | None = None
    rb: np.ndarray | None = None
    cv: np.ndarray | None = None
    rbn: np.ndarray | None = None
    cvn: np.ndarray | None = None
    groups: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def group_means(self) -> dict:
        """Group label -> (RB, CV, RBN) in percent."""
        out = {}
        for g in np.unique(self.groups):
            sel = self.groups == g
            out[int(g)] = (
                100 * float(self.rb[sel].mean()),
                100 * float(self.cv[sel].mean()),
                100 * float(self.rbn[sel].mean()),
            )
        return out


def _config_dict(config: DgpConfig) -> dict:
    d = asdict(config)
    d["sizes"] = list(config.sizes)
    return d


def run_eblup_mse_study(config: DgpConfig, R: int, opts: FitOptions | None = None, *, workers: int | None = None) -> StudyResult:
    """Per-area simulated MSE of the HNERVF and homoscedastic EBLUPs."""
    if R < 1:
        raise ValueError("R must be positive")
    opts = opts or FitOptions()
    config.design  # build before forking
    results = _map(partial(_eblup_rep, config, opts), range(R), workers)
    h_sum = np.zeros(config.m)
    n_sum = np.zeros(config.m)
    h_ok = n_ok = 0
    for hv, nr in results:
        if hv is not None:
            h_sum += hv**2
            h_ok += 1
        if nr is not None:
            n_sum += nr**2
            n_ok += 1
    failures = {"hnervf": R - h_ok, "ner": R - n_ok}
    _check_failures(R - h_ok, R, "HNERVF fits")
    _check_failures(R - n_ok, R, "NER fits")
    return StudyResult(
        config=_config_dict(config),
        replications=R,
        failures=failures,
        area_ids=list(config.design.ids),
        sizes=np.asarray(config.sizes),
        mse_hnervf=h_sum / max(h_ok, 1),
        mse_ner=n_sum / max(n_ok, 1),
    )


def true_mse(config: DgpConfig, R: int, opts: FitOptions | None = None, *, workers: int | None = None):
    """Simulated MSE of the HNERVF EBLUP; returns (mse, failures)."""
    opts = opts or FitOptions()
    config.design
    results = _map(partial(_mse_rep, config, opts), range(R), workers)
    acc = np.zeros(config.m)
    ok = 0
    for d in results:
        if d is not None:
            acc += d**2
            ok += 1
    _check_failures(R - ok, R, "true-MSE stage")
    return acc / max(ok, 1), R - ok


def run_mse_estimator_study(
    config: DgpConfig,
    R_mse: int,
    R_est: int,
    opts: FitOptions | None = None,
    *,
    workers: int | None = None,
    mse_truth: np.ndarray | None = None,
) -> StudyResult:
    """Relative bias and CV of the corrected and naive MSE estimators.

    Areas are grouped by sample size.  ``mse_truth`` skips the first stage.
    """
    opts = opts or FitOptions()
    if mse_truth is None:
        mse_truth, f1 = true_mse(config, R_mse, opts, workers=workers)
    else:
        f1 = 0
    results = _map(partial(_est_rep, config, opts), range(R_est), workers)
    good = [res for res in results if res is not None]
    ok = len(good)
    _check_failures(R_est - ok, R_est, "MSE-estimation stage")
    if ok:
        est = np.array([g[0] for g in good])
        naive = np.array([g[1] for g in good])
    else:
        est = naive = np.full((1, config.m), np.nan)
    d = (est - mse_truth) / mse_truth
    dn = (naive - mse_truth) / mse_truth
    sizes = np.asarray(config.sizes)
    _, groups = np.unique(sizes, return_inverse=True)
    return StudyResult(
        config=_config_dict(config),
        replications=R_est,
        failures={"mse_stage": int(f1), "estimation_stage": R_est - ok},
        area_ids=list(config.design.ids),
        sizes=sizes,
        mse_hnervf=mse_truth,
        rb=d.mean(0),
        cv=np.sqrt((d**2).mean(0)),
        rbn=dn.mean(0),
        cvn=np.sqrt((dn**2).mean(0)),
        groups=groups + 1,
        extra={
            "mean_estimate": est.mean(0),
            "R_mse": R_mse,
            # robust companions: one extreme replication can dominate the mean
            "rb_median": np.median(d, 0),
            "max_relative_error": d.max(0),
            "worst_replication": int(np.argmax(d.max(1))) if ok == R_est else None,
        },
    )


# ---------------------------------------------------------------- land-price fixture

LAND_PRICE_TRUTH = ModelParams(np.array([42.31, 2.81, -3.56, -0.66]), np.array([4.91, -1.82]), 6.60)


def land_price_fixture(seed: int = 2001, truth: ModelParams = LAND_PRICE_TRUTH):
    """Synthetic stand-in for a station-level land price survey.

    52 areas with sizes around 4 (several singletons); y is regressed on the
    floor-area ratio, an area-level travel time and the distance to the
    station, and the error variance decays with distance.  Returns
    ``(dataset, truth)``.
    """
    rng = np.random.default_rng([seed, 52])
    m = 52
    sizes = np.clip(rng.poisson(3.2, m) + 1, 1, 11)
    sizes[:4] = 1
    N = int(sizes.sum())
    idx = np.repeat(np.arange(m), sizes)
    far = rng.uniform(0.5, 6.0, N)
    travel = np.sort(rng.uniform(0.5, 7.0, m))[idx]
    dist = rng.uniform(0.0, 3.0, N)
    X = np.column_stack([np.ones(N), far, travel, dist])
    Z = np.column_stack([np.ones(N), dist])
    v = rng.normal(0.0, np.sqrt(truth.tau2), m)
    e = rng.normal(0.0, 1.0, N) * np.exp(0.5 * Z @ truth.gamma)
    y = X @ truth.beta + v[idx] + e
    ids = [f"s{k + 1:02d}" for k in idx]
    return ClusteredDataset.from_arrays(ids, y, X, Z), truth
