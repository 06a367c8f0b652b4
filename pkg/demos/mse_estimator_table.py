"""Relative bias and CV of the corrected MSE estimator against the naive
plug-in, by area-size group (4..7 observations per area).

    python3 demos/mse_estimator_table.py --R-mse 2000 --R-est 500
"""

import argparse

import numpy as np

from hnervf.simulation import preset, run_mse_estimator_study

ap = argparse.ArgumentParser()
ap.add_argument("--R-mse", type=int, default=2000)
ap.add_argument("--R-est", type=int, default=500)
ap.add_argument("--models", nargs="+", default=["M1", "M2", "M3", "M4", "M5"])
args = ap.parse_args()

print("model " + " ".join(f"{'G' + str(g) + ' RB':>8} {'CV':>6} {'RBN':>6}" for g in range(1, 5)))
for d in args.models:
    res = run_mse_estimator_study(preset("table1", distribution=d), args.R_mse, args.R_est)
    gm = res.group_means()
    print(f"{d:>5} " + " ".join(f"{gm[g][0]:8.2f} {gm[g][1]:6.2f} {gm[g][2]:6.2f}" for g in sorted(gm)))
    worst = res.extra["max_relative_error"].max()
    if worst > 10:
        # a single replication can dominate a mean of relative errors
        print(f"      largest single relative error {worst:.3g}; median-based RB "
              f"{100 * np.median(res.extra['rb_median']):.2f}")
