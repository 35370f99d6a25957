"""Acceptance suite: one PASS/FAIL line per criterion (see the summary at the end of the run).

Criteria 6 and 7 fit 30 replicates of five desk-scale scenarios with both
models; they carry the ``slow`` marker. Set RISKFIELD_JOBS to use more cores.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import null_space
from scipy.stats import norm

import test_evaluation
import toy_models as tm
from graphs import random_connected
from riskfield.bym import PcPriorPhi, icar_precision
from riskfield.config import Config, Scenario
from riskfield.gmrf import cholesky
from riskfield.inference import GaussianObs, LatentSpec, fit_latent_model, laplace_log_marginal
from riskfield.pipeline import build_context, cmd_evaluate, cmd_fit, cmd_simulate, solve_scenario
from riskfield.population import Window
from riskfield.risk_surface import CircleSpec, expected_cases, solve_surface_parameters
from riskfield.simulate import simulate_dataset
from riskfield.spde import (
    MaternHyper,
    assemble_fem,
    build_mesh,
    matern_covariance,
    pc_log_prior_range_sigma,
    spde_precision,
)
from test_inference import IID_MEAN, IID_SD, LAPLACE_LOGZ, RW_MEAN, RW_SD, SINGLE_MEAN, SINGLE_SD
from test_pipeline import _csvs, _run


@pytest.fixture(scope="module")
def desk():
    return build_context(Config())


def test_criterion_1_spde_fidelity(verdict):
    t0 = time.perf_counter()
    rho = 3000.0
    h = MaternHyper(rho, 1.0)
    win = Window(0.0, 0.0, 4 * rho, 4 * rho)
    mesh = build_mesh(win, rho / 5, 2 * rho)
    F = cholesky(spde_precision(assemble_fem(mesh), h))
    S = F.selected_inverse().tocoo()
    inside = win.contains(mesh.nodes)
    keep = (S.row < S.col) & inside[S.row] & inside[S.col]
    i, j, cov = S.row[keep], S.col[keep], S.data[keep]
    d = np.linalg.norm(mesh.nodes[i] - mesh.nodes[j], axis=1)
    band = (d >= 0.1 * rho) & (d <= rho)
    err = np.abs(cov[band] / matern_covariance(d[band], h) - 1.0)
    dt = time.perf_counter() - t0
    n_pairs = int(band.sum())
    ok = n_pairs >= 200 and err.max() < 0.05 and dt < 30
    assert verdict(1, ok, f"{n_pairs} pairs, max rel err {err.max():.4f}, {dt:.1f} s")


def test_criterion_2_icar_scaling(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(10):
        n = int(rng.integers(10, 301))
        s = icar_precision(random_connected(n, seed=100 + k, extra=float(rng.uniform(0.2, 2.0))))
        # constrained variances from a dense basis of the sum-to-zero subspace
        B = null_space(np.ones((1, n)))
        var = np.diag(B @ np.linalg.inv(B.T @ s.Q_star.toarray() @ B) @ B.T)
        worst = max(worst, abs(np.exp(np.log(var).mean()) - 1.0))
    assert verdict(2, worst <= 1e-6, f"max |geomean - 1| = {worst:.2e} over 10 graphs")


def test_criterion_3_prior_calibration(verdict, desk):
    prior = lambda s, u: np.exp(pc_log_prior_range_sigma(MaternHyper(np.exp(u), s))) * np.exp(u)
    mass = lambda a, b, c, d: integrate.dblquad(prior, a, b, c, d, epsabs=1e-13, epsrel=1e-12)[0]
    # over u = log(rho); Pr(rho < 100 m) = exp(-208) and Pr(rho > e^30) ~ 2e-9 are negligible
    lo, mid, hi = np.log(100.0), np.log(30000.0), 30.0
    p_rho = mass(lo, mid, 0.0, np.inf)
    p_sig = mass(lo, mid, 1.0, np.inf) + mass(mid, hi, 1.0, np.inf)
    phi = PcPriorPhi(desk.structure)
    knots = np.clip(phi.grid[phi.grid <= 0.5], 1e-12, 0.5)
    if knots[-1] < 0.5:
        knots = np.r_[knots, 0.5]
    f = lambda p: np.exp(phi.log_density(p))
    p_phi = sum(integrate.quad(f, a, b)[0] for a, b in zip(knots[:-1], knots[1:]))
    ok = abs(p_sig - 0.01) <= 1e-6 and abs(p_rho - 0.5) <= 1e-6 and abs(p_phi - 0.5) <= 1e-3
    assert verdict(3, ok, f"Pr(sigma>1)={p_sig:.8f} Pr(rho<30km)={p_rho:.8f} "
                          f"Pr(phi<=0.5)={p_phi:.5f} ({desk.structure.n} units)")


def test_criterion_4_inference_oracle(verdict):
    t0 = time.perf_counter()
    errs = []
    for toy, mean, sd in ((tm.toy_single, [SINGLE_MEAN], [SINGLE_SD]), (tm.toy_iid, IID_MEAN, IID_SD),
                          (tm.toy_rw, RW_MEAN, RW_SD)):
        res = fit_latent_model(*toy())
        errs.append(max(np.abs(res.mean_eta / mean - 1).max(), np.abs(res.sd_eta / sd - 1).max()))
    lap = abs(laplace_log_marginal(*tm.toy_laplace(), np.array([0.0])) - LAPLACE_LOGZ)
    y, v, q = 0.7, 0.3, 2.0
    spec = LatentSpec(Q=np.array([[q]]), design=np.array([[1.0]]))
    gauss = abs(laplace_log_marginal(tm._fixed_hyper(1, spec), GaussianObs([y], v), np.array([0.0]))
                - norm.logpdf(y, 0.0, np.sqrt(v + 1 / q)))
    dt = time.perf_counter() - t0
    ok = max(errs) <= 0.02 and lap <= 1e-3 and gauss <= 1e-10 and dt < 60
    assert verdict(4, ok, f"toy rel errs {np.round(errs, 4).tolist()}, Laplace {lap:.1e}, "
                          f"Gaussian {gauss:.1e}, {dt:.1f} s")


def test_criterion_5_simulation_closure(verdict, desk):
    cfg = desk.cfg
    kn = 5 * cfg.n_ref
    worst = 0.0
    for shape in ("step", "smooth"):
        for r in (1000.0, 5000.0, 10000.0):
            for c in (2.0, 5.0):
                s = solve_surface_parameters(desk.pop, CircleSpec(desk.centres, r), c, 5.0, cfg.n_ref, shape)
                worst = max(worst, abs(expected_cases(s, desk.pop) / kn - 1))
    sc = Scenario("flat", 0.0, 1.0, 5.0)
    flat = solve_scenario(desk, sc)
    tot = np.array([simulate_dataset(flat, desk.pop, cfg.scenario_seed(sc), j).total_cases for j in range(200)])
    lam = flat.lambda0
    se = np.sqrt(desk.pop.total * lam * (1 - lam) / 200)
    z = (tot.mean() - kn) / se
    ok = worst <= 1e-6 and abs(z) <= 3
    assert verdict(5, ok, f"max closure rel err {worst:.1e}; flat mean {tot.mean():.2f} vs {kn} ({z:+.2f} se)")


SC6 = {
    "a_step": Scenario("step", 10000.0, 5.0, 5.0),
    "a_smooth": Scenario("smooth", 10000.0, 5.0, 5.0),
    "c_step": Scenario("step", 1000.0, 2.0, 5.0),
    "c_smooth": Scenario("smooth", 1000.0, 2.0, 5.0),
    "cov": Scenario("smooth", 5000.0, 5.0, 5.0),
}


@pytest.fixture(scope="module")
def desk_runs(desk, tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    out = {}
    for key, sc in SC6.items():
        cfg = replace(desk.cfg, scenario=sc)
        d = root / key
        cmd_simulate(cfg, d, ctx=desk)
        cmd_fit(cfg, d, ctx=desk)
        out[key] = cmd_evaluate(cfg, d, ctx=desk)
    return out


def _median(reports, sid, model, metric):
    return float(np.nanmedian(reports[(sid, model)].column(metric)))


@pytest.mark.slow
def test_criterion_6_directional(verdict, desk_runs):
    parts, ok = [], True
    for key in ("a_step", "a_smooth"):
        sid = SC6[key].scenario_id
        b, l = (_median(desk_runs[key], sid, m, "auc_area") for m in ("bym", "lgcp"))
        ok &= l > b
        parts.append(f"(a) {sid} AUC bym {b:.3f} lgcp {l:.3f}")
    sid = SC6["a_smooth"].scenario_id
    b, l = (_median(desk_runs["a_smooth"], sid, m, "rmise_area_log") for m in ("bym", "lgcp"))
    ok &= l < b
    parts.append(f"(b) {sid} RMISE bym {b:.0f} lgcp {l:.0f}")
    for key in ("c_step", "c_smooth"):
        sid = SC6[key].scenario_id
        b, l = (_median(desk_runs[key], sid, m, "rmise_area_log") for m in ("bym", "lgcp"))
        ok &= b < l
        parts.append(f"(c) {sid} RMISE bym {b:.0f} lgcp {l:.0f}")
    assert verdict(6, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_7_coverage_direction(verdict, desk_runs):
    sid = SC6["cov"].scenario_id
    b, l = (_median(desk_runs["cov"], sid, m, "coverage") for m in ("bym", "lgcp"))
    assert verdict(7, l >= b, f"{sid} median coverage bym {b:.3f} lgcp {l:.3f}")


def test_criterion_8_metrics_suite(verdict, tmp_path):
    names = [n for n in dir(test_evaluation) if n.startswith("test_")]
    failed = []
    for n in names:
        fn = getattr(test_evaluation, n)
        marks = getattr(fn, "pytestmark", [])
        params = [m for m in marks if m.name == "parametrize"]
        try:
            if params:
                argnames, values = params[0].args
                for v in values:
                    fn(**dict(zip([a.strip() for a in argnames.split(",")], v if isinstance(v, tuple) else (v,))))
            elif n == "test_report_gap_rows_and_summary":
                fn(tmp_path)
            else:
                fn()
        except Exception as exc:  # noqa: BLE001 - any failure counts against the criterion
            failed.append(f"{n}: {type(exc).__name__}")
    ok = not failed
    assert verdict(8, ok, f"{len(names) - len(failed)}/{len(names)} metric checks, "
                          f"AUC invariance on 100 score vectors" + (f"; failed {failed}" if failed else ""))


def test_criterion_9_determinism(verdict, tmp_path):
    _run(tmp_path / "a", jobs=1)
    _run(tmp_path / "b", jobs=2)
    fa, fb = _csvs(tmp_path / "a"), _csvs(tmp_path / "b")
    same = fa == fb and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in fa)
    assert verdict(9, same, f"{len(fa)} CSV files byte-identical across two seeded runs (1 and 2 workers)")
