"""The Laplace engine next to brute-force quadrature on a three-cell Poisson model.

Cells share an intercept and have iid effects with unknown precision; the
quadrature integrates the latent values on a tensor grid for each value of
the hyperparameter, so nothing is approximated beyond the grid spacing.

    python3 demos/engine_check.py
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
import toy_models as tm  # noqa: E402
from riskfield.inference import fit_latent_model  # noqa: E402

model, obs = tm.toy_iid()
res = fit_latent_model(model, obs, thresholds=[0.05], n_samples=4000, seed=0)
print("counts  ", obs.counts, " offsets", obs.offsets)
print("theta grid (log sd):", np.round(np.array(res.hyper["grid_points"])[:, 0], 3))
print("weights            :", np.round(res.hyper["grid_weights"], 3))

print("quadrature oracle (about half a minute) ...")
_, _, m, s = tm.oracle_iid()
print(f"{'cell':>4} {'engine mean':>12} {'oracle mean':>12} {'engine sd':>10} {'oracle sd':>10}")
for i in range(3):
    print(f"{i:4d} {res.mean_eta[i]:12.5f} {m[i]:12.5f} {res.sd_eta[i]:10.5f} {s[i]:10.5f}")
print("Pr(risk > 0.05):", np.round(res.exceedance[0.05], 4),
      " from samples:", np.round((res.samples > np.log(0.05)).mean(axis=0), 4))
