"""Walk through one replicate by hand: population, surface, cases, both fits, metrics.

Runs on a small 12 x 9 km window so it finishes in a few seconds:

    python3 demos/single_replicate.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from riskfield.bym import icar_precision
from riskfield.evaluation import MetricsConfig, evaluate_replicate
from riskfield.fit import fit_bym, fit_lgcp, prepare_lgcp
from riskfield.pipeline import write_pbm, write_pgm
from riskfield.population import (
    Window,
    adjacency_from_partition,
    build_areal_partition,
    build_eval_grid,
    build_synthetic_population,
    default_centres,
)
from riskfield.risk_surface import CircleSpec, expected_cases, solve_surface_parameters
from riskfield.simulate import aggregate_to_grid, aggregate_to_units, simulate_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

win = Window(0.0, 0.0, 12000.0, 9000.0)
centres = default_centres(win)
pop = build_synthetic_population(win, 250.0, 40000, centres, seed=1)
part = build_areal_partition(pop, 25, seed=0)
grid = build_eval_grid(pop, 500.0)
print(f"population {pop.total} on {pop.raster.shape} cells; {part.unit_count} units; {grid.n_cells} grid cells")

# two high-risk circles of radius 1.5 km, five times the background, 5n expected cases
n_ref, k = 334, 5.0
circles = CircleSpec(tuple(c[0] for c in centres), 1500.0)
surface = solve_surface_parameters(pop, circles, 5.0, k, n_ref, "smooth")
print(f"smooth surface: background {surface.lambda0:.3e}, expected cases {expected_cases(surface, pop):.1f}")

ds = simulate_dataset(surface, pop, seed=7, replicate=0)
print(f"simulated {ds.total_cases} cases")

ref = k * n_ref / pop.total
structure = icar_precision(adjacency_from_partition(part))
y_u, p_u = aggregate_to_units(ds, part, pop)
bym = fit_bym(y_u, p_u, structure, thresholds=[ref], n_samples=500, seed=1)
y_g, p_g = aggregate_to_grid(ds, grid, pop)
lgcp = fit_lgcp(y_g, p_g, prepare_lgcp(grid, 1000.0), thresholds=[ref], n_samples=500, seed=1)
for name, res in (("bym", bym), ("lgcp", lgcp)):
    print(f"{name:5s} hyper mode {res.hyper['mode_natural']}  grid {res.diagnostics['grid_size']} points"
          f"  {res.diagnostics['runtime_s']:.1f} s")

truth = np.log(surface.risk_at(grid.centroids()))
cfg = MetricsConfig(ref)
maps = {"bym": part.unit_of(grid.centroids()) - 1, "lgcp": np.arange(grid.n_cells)}
for name, res in (("bym", bym), ("lgcp", lgcp)):
    row, _ = evaluate_replicate(truth, res, maps[name], grid.areas(), grid.population, cfg)
    print(f"{name:5s} " + "  ".join(f"{k}={v:.3g}" for k, v in row.items()))
    exc = res.exceedance[ref][maps[name]].reshape(grid.raster.shape)
    write_pgm(res.mean_risk[maps[name]].reshape(grid.raster.shape), out / f"{name}_mean_risk.pgm")
    write_pbm(exc > 0.8, out / f"{name}_mask_0.8.pbm")
write_pgm(np.exp(truth).reshape(grid.raster.shape), out / "truth.pgm")
print(f"maps in {out}/")
