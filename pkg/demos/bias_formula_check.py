"""Monte Carlo check of the second-order bias of (gamma_hat, tau2_hat).

Compares the simulated bias E[theta_hat] - theta with the average of the
estimated bias terms, for the re-derived and the printed expressions.

    python3 demos/bias_formula_check.py --m 100 --R 2000
"""

import argparse

import numpy as np

from hnervf import FitOptions, fit
from hnervf.estimation import bias_terms
from hnervf.simulation import DgpConfig, generate_dgp

ap = argparse.ArgumentParser()
ap.add_argument("--m", type=int, default=100)
ap.add_argument("--R", type=int, default=1000)
args = ap.parse_args()

cfg = DgpConfig(m=args.m, sizes=8)
err, b = [], {"derived": [], "printed": []}
for r in range(args.R):
    data, _, truth = generate_dgp(cfg, r, stage=9)
    res = fit(data)
    err.append(res.params.theta[2:] - truth.theta[2:])
    for form in b:
        bt = bias_terms(data, res.params, res.omega, res.vf, influence=res.influence, formulas=form)
        b[form].append(np.r_[bt.b_gamma, bt.b_tau])
err = np.array(err)
se = err.std(0, ddof=1) / np.sqrt(args.R)
print(f"{'':10}{'gamma0':>10}{'gamma1':>10}{'tau2':>10}")
print(f"{'simulated':10}" + "".join(f"{v:10.4f}" for v in err.mean(0)))
print(f"{'  +- SE':10}" + "".join(f"{v:10.4f}" for v in se))
for form, vals in b.items():
    print(f"{form:10}" + "".join(f"{v:10.4f}" for v in np.mean(vals, 0)))
