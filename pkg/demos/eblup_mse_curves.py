"""Per-area simulated MSE of the HNERVF and homoscedastic EBLUPs.

With heteroscedastic truth (fig1) the variance-function model should win in
(almost) every area; with homoscedastic truth (fig2) the price of the extra
parameter should be small.

    python3 demos/eblup_mse_curves.py --R 1000
"""

import argparse

import numpy as np

from hnervf.simulation import preset, run_eblup_mse_study

ap = argparse.ArgumentParser()
ap.add_argument("--R", type=int, default=500)
ap.add_argument("--models", nargs="+", default=["M1", "M2", "M3", "M4", "M5"])
args = ap.parse_args()

for name in ("fig1", "fig2"):
    print(f"== {name}")
    for d in args.models:
        res = run_eblup_mse_study(preset(name, distribution=d), args.R)
        ratio = res.mse_hnervf / res.mse_ner
        print(f"{d}: HNERVF/NER MSE ratio  min {ratio.min():.3f}  median {np.median(ratio):.3f}  "
              f"max {ratio.max():.3f}  HNERVF better in {np.mean(ratio < 1):.0%} of areas")
