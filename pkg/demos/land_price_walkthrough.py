"""Fit a heteroscedastic and a homoscedastic nested error model to a synthetic
land-price survey and compare EBLUPs, shrinkage and estimated SMSE per area.

    python3 demos/land_price_walkthrough.py
"""

import numpy as np

from hnervf import fit, mse_report
from hnervf.simulation import fit_ner_baseline, land_price_fixture
from hnervf.model import ClusteredDataset

data, truth = land_price_fixture()
het = fit(data)

# same data with a constant variance covariate: the homoscedastic submodel
ones = ClusteredDataset.from_arrays(data.index, data.y, data.X, np.ones((data.N, 1)))
hom = fit(ones)

names = ["b0", "b1 (FAR)", "b2 (time)", "b3 (dist)", "g0", "g1", "tau2"]
print(f"{'':8}" + "".join(f"{n:>11}" for n in names))
print(f"{'truth':8}" + "".join(f"{v:11.2f}" for v in truth.theta))
print(f"{'HNERVF':8}" + "".join(f"{v:11.2f}" for v in het.params.theta))
h = hom.params.theta
print(f"{'NER':8}" + "".join(f"{v:11.2f}" for v in np.r_[h[:4], h[4], 0.0, h[5]]))
print("flags:", het.flags or "none")

rh, rn = mse_report(het, data), mse_report(hom, ones)
order = np.argsort(data.sizes, kind="stable")
print(f"\n{'area':>5} {'n':>3} {'mean':>7} {'EBLUP':>7} {'SMSE':>6} {'EBLUP':>7} {'SMSE':>6}")
print(f"{'':17}{'--- HNERVF ---':>15}{'--- NER ---':>15}")
for k in order[:: max(1, len(order) // 15)]:
    print(f"{data.ids[k]:>5} {data.sizes[k]:3d} {rh.sample_mean[k]:7.2f} {rh.eblup[k]:7.2f} "
          f"{rh.smse[k]:6.2f} {rn.eblup[k]:7.2f} {rn.smse[k]:6.2f}")

print(f"\nHNERVF SMSE below NER in {np.mean(rh.smse < rn.smse):.0%} of areas")
print(f"shrinkage dif_i spread (sd): HNERVF {rh.dif.std():.2f}, NER {rn.dif.std():.2f}")
_, ner_mu, _ = fit_ner_baseline(data)
assert np.allclose(ner_mu, rn.eblup)
