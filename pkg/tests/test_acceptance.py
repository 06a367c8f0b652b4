"""Acceptance criteria 1-9, each at its stated scale and tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing criterion still reports its numbers.
"""

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, homoscedastic_dataset
from hnervf import variance as vfmod
from hnervf.estimation import FitOptions, fit, ols_fit, solve_gamma
from hnervf.model import Cluster, ModelParams, cluster_geometry
from hnervf.prediction import NORMAL_KURTOSIS, mse_report
from hnervf.simulation import (
    DISTRIBUTIONS,
    LAND_PRICE_TRUTH,
    DgpConfig,
    generate_dgp,
    grouped_sizes,
    land_price_fixture,
    preset,
    run_eblup_mse_study,
    run_mse_estimator_study,
)
from test_estimation import _prasad_rao

pytestmark = pytest.mark.slow

EXP = vfmod.exponential()

# reference group means (RB, CV, RBN) in percent for two cells of the grouped design
TABLE1_TARGETS = {("M1", 1): (-8.72, 17.48, -10.67), ("M5", 4): (-4.27, 24.98, -5.42)}
TOL_PP = 3.0


def record(k, ok, detail):
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def table1():
    cfg = preset("table1")
    out = {}
    for d in DISTRIBUTIONS:
        out[d] = run_mse_estimator_study(cfg.with_(distribution=d), R_mse=10_000, R_est=2_000)
    return out


def test_criterion_1_table1_reproduction(table1):
    parts, ok = [], True
    for (model, g), target in TABLE1_TARGETS.items():
        got = table1[model].group_means()[g]
        for name, x, t in zip(("RB", "CV", "RBN"), got, target):
            good = abs(x - t) <= TOL_PP
            ok &= good
            parts.append(f"{model}/G{g} {name} {x:.2f} vs {t:.2f}{'' if good else ' (off)'}")
    record(1, ok, "; ".join(parts))
    assert ok


def test_criterion_2_naive_more_biased(table1):
    bad = []
    for d, res in table1.items():
        for g, (rb, _, rbn) in res.group_means().items():
            if not abs(rb) <= abs(rbn):
                med = 100 * np.median(res.extra["rb_median"][res.groups == g])
                bad.append(f"{d}/G{g} RB {rb:.4g} RBN {rbn:.2f} (median-based RB {med:.2f})")
    ok = not bad
    record(2, ok, f"{20 - len(bad)}/20 cells with |RB| <= |RBN|" + ("; violations: " + "; ".join(bad) if bad else ""))
    assert ok


def test_criterion_3_fig1_hnervf_wins():
    res = run_eblup_mse_study(preset("fig1"), 2_000)
    frac = float(np.mean(res.mse_hnervf < res.mse_ner))
    ok = frac >= 0.8
    record(3, ok, f"HNERVF MSE < NER MSE in {frac:.0%} of areas (need >= 80%)")
    assert ok


def test_criterion_4_fig2_overspecification_cost():
    worst = {}
    for d in ("M2", "M3", "M4", "M5"):
        res = run_eblup_mse_study(preset("fig2", distribution=d), 2_000)
        worst[d] = float(np.max(np.abs(res.mse_hnervf / res.mse_ner - 1)))
    ok = max(worst.values()) <= 0.15
    record(4, ok, "max per-area |HNERVF/NER - 1|: " + ", ".join(f"{d} {v:.3f}" for d, v in worst.items()) + " (need <= 0.15)")
    assert ok


def test_criterion_5_oracle_equivalence():
    worst_g = worst_t = 0.0
    for seed in range(100):
        rng = np.random.default_rng(90_000 + seed)
        d = homoscedastic_dataset(rng, m=int(rng.integers(5, 40)), n_range=(1, 8))
        b = np.linalg.lstsq(d.X, d.y, rcond=None)[0]
        r = d.within(d.y - d.X @ b)
        s2 = np.sum(r**2) / np.sum(d.sizes - 1)
        t2 = max(np.mean((d.y - d.X @ b) ** 2) - s2, 0.0)
        res = fit(d, diagnostics=False)
        worst_g = max(worst_g, abs(res.gamma[0] - np.log(s2)))
        worst_t = max(worst_t, abs(res.tau2 - t2))
    worst_pr = 0.0
    for seed in range(50):
        rng = np.random.default_rng(91_000 + seed)
        d = homoscedastic_dataset(rng, m=int(rng.integers(6, 30)), n_range=(2, int(rng.integers(2, 9))),
                                  p=int(rng.integers(1, 4)), balanced=True, cluster_level_x=True)
        s2_pr, t2_pr = _prasad_rao(d)
        res = fit(d, opts=FitOptions(tau2_truncation=False), diagnostics=False)
        p, m, N = d.p, d.m, d.N
        dev = max(abs(np.exp(res.gamma[0]) / s2_pr - 1),
                  abs(res.tau2_raw - ((1 - p / m) * t2_pr - (p / N) * s2_pr)) / max(abs(t2_pr), s2_pr))
        worst_pr = max(worst_pr, dev)
    ok = worst_g <= 1e-10 and worst_t <= 1e-10 and worst_pr <= 1e-9
    record(5, ok, f"max |gamma - closed form| {worst_g:.1e}, max |tau2 - closed form| {worst_t:.1e} (100 sets); "
                  f"Prasad-Rao affine map max rel dev {worst_pr:.1e} (50 balanced sets)")
    assert ok


def test_criterion_6_algebraic_identities():
    rng = np.random.default_rng(606)
    wood = shrink = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        t2 = float(rng.uniform(0, 20))
        s = np.exp(rng.uniform(-3, 3, n))
        c = Cluster("a", np.zeros(n), np.ones((n, 1)), np.log(s)[:, None])
        g = cluster_geometry(ModelParams([0.0], [1.0], t2), c, EXP)
        wood = max(wood, np.abs(g.SigmaInv - np.linalg.inv(t2 * np.ones((n, n)) + np.diag(s))).max())
        lhs = (g.lam.sum() - 1) ** 2 * t2 + np.sum(g.lam**2 * g.sigma2)
        shrink = max(shrink, abs(lhs - t2 / g.eta) / max(1.0, t2))
    r31_max = ident = 0.0
    for r in range(20):
        d, _, _ = generate_dgp(preset("table1"), r, stage=6)
        res = fit(d)
        rep = mse_report(res, d)
        ok_rows = ~rep.clipped
        ident = max(ident, np.abs(rep.mse_estimate - (rep.r1_corrected + rep.r2 + 2 * rep.r31))[ok_rows].max())
        res.kurtosis = NORMAL_KURTOSIS
        r31_max = max(r31_max, np.abs(mse_report(res, d).r31).max())
    ok = wood <= 1e-9 and shrink <= 1e-12 and r31_max == 0.0 and ident == 0.0
    record(6, ok, f"Woodbury max err {wood:.1e}; shrinkage identity {shrink:.1e}; "
                  f"R31 at kappa=(3,3) max {r31_max:.1e}; mse decomposition max err {ident:.1e}")
    assert ok


def test_criterion_7_second_order_unbiasedness():
    cfg = preset("table1", m=100, sizes=grouped_sizes(4, 25, 3))
    res = run_mse_estimator_study(cfg, R_mse=10_000, R_est=2_000)
    ratio = float(np.mean(res.extra["mean_estimate"] / res.mse_hnervf))
    ok = 0.85 <= ratio <= 1.10
    record(7, ok, f"mean over areas of E[mse estimate]/MSE = {ratio:.4f} at m=100 (need [0.85, 1.10])")
    assert ok


def test_criterion_8_consistency():
    rmse = {}
    for m in (80, 320):
        cfg = DgpConfig(m=m, sizes=8)
        err = []
        for r in range(300):
            d, _, truth = generate_dgp(cfg, r, stage=8)
            err.append(fit(d, diagnostics=False).params.theta - truth.theta)
        err = np.array(err)
        rmse[m] = np.array([
            np.sqrt((err[:, :2] ** 2).sum(1).mean()),
            np.sqrt((err[:, 2:4] ** 2).sum(1).mean()),
            np.sqrt((err[:, 4] ** 2).mean()),
        ])
    ratio = rmse[320] / rmse[80]
    ok = bool(np.all((ratio >= 0.35) & (ratio <= 0.70)))
    record(8, ok, f"RMSE(m=320)/RMSE(m=80): beta {ratio[0]:.3f}, gamma {ratio[1]:.3f}, tau2 {ratio[2]:.3f} (need [0.35, 0.70])")
    assert ok


def test_criterion_9_land_price_substitute():
    # the survey data are unavailable; a synthetic fixture with the same layout and
    # known coefficients checks sign and location recovery instead
    d, truth = land_price_fixture()
    res = fit(d)
    signs = res.gamma[1] < 0 and res.beta[2] < 0 and res.beta[3] < 0
    est = np.array([fit(land_price_fixture(s)[0], diagnostics=False).params.theta for s in range(200)])
    neg = float(np.mean(est[:, 5] < 0))
    se = est.std(0, ddof=1) / np.sqrt(len(est))
    z = np.abs(est.mean(0)[:6] - truth.theta[:6]) / se[:6]
    rep = mse_report(res, d)
    ok = bool(signs and neg >= 0.95 and np.all(z <= 3) and len(rep) == 52 and np.all(rep.mse_estimate > 0))
    record(9, ok, f"fixture gamma1_hat {res.gamma[1]:.2f} (truth {LAND_PRICE_TRUTH.gamma[1]}), "
                  f"gamma1_hat < 0 in {neg:.0%} of 200 fixtures, max |mean - truth| {z.max():.1f} SE over beta, gamma")
    assert ok
