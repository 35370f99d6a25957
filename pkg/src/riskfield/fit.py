"""BYM2 and SPDE-LGCP fits on top of the generic Laplace engine, plus result I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit

from .bym import IcarStructure, PcPriorPhi, UniformPhiPrior, pc_log_prior_tau
from .errors import ConfigurationError, DomainError, ParseError
from .gmrf import ConstraintSet
from .inference import FitResult, LatentModel, LatentSpec, PoissonObs, fit_latent_model
from .population import EvalGrid
from .spde import (
    MaternHyper,
    Mesh,
    SpdeOperator,
    assemble_fem,
    build_mesh,
    pc_log_prior_range_sigma,
    projector,
)

BETA0_PRECISION = 1e-6
LOG_SD_BOX = (-5.0, 3.0)
LOGIT_PHI_BOX = (-8.0, 8.0)


def _phi_prior(structure: IcarStructure, kind):
    if kind == "pc":
        return PcPriorPhi(structure)
    if kind == "uniform":
        return UniformPhiPrior()
    if hasattr(kind, "log_density"):
        return kind
    raise ConfigurationError(f"unknown phi prior {kind!r}")


def bym_model(structure: IcarStructure, phi_prior="pc") -> LatentModel:
    """Latent ``(v, u*, beta0)``; theta = (log(1/sqrt(tau)), logit(phi))."""
    n = structure.n
    if n == 1:
        return _single_unit_model()
    prior = _phi_prior(structure, phi_prior)
    Q = sparse.block_diag(
        [sparse.identity(n), structure.Q_star, sparse.csr_matrix([[BETA0_PRECISION]])], format="csr"
    )
    C = ConstraintSet.sum_to_zero(n, slice(n, 2 * n), 2 * n + 1)
    logdet = structure.logdet_star + np.log(BETA0_PRECISION)
    eye = sparse.identity(n, format="csr")
    ones = sparse.csr_matrix(np.ones((n, 1)))

    def natural(theta):
        return float(np.exp(-2.0 * theta[0])), float(expit(theta[1]))

    def build(theta):
        tau, phi = natural(theta)
        a = np.sqrt((1.0 - phi) / tau)
        c = np.sqrt(phi / tau)
        D = sparse.hstack([a * eye, c * eye, ones], format="csr")
        return LatentSpec(Q=Q, design=D, constraint=C, targets=D, logdet_prior=logdet)

    def log_hyper_prior(theta):
        tau, phi = natural(theta)
        # densities on tau and phi plus log-Jacobians of the internal transform
        return float(pc_log_prior_tau(tau) + np.log(2.0 * tau)
                     + prior.log_density(phi) + np.log(phi * (1.0 - phi)))

    return LatentModel(
        n_latent=2 * n + 1,
        build=build,
        log_hyper_prior=log_hyper_prior,
        bounds=np.array([LOG_SD_BOX, LOGIT_PHI_BOX]),
        theta_init=np.array([np.log(0.5), 0.0]),
        names=("log_sd", "logit_phi"),
        to_natural=lambda t: dict(zip(("tau", "phi"), natural(t))),
        intercept_index=2 * n,
    )


def _single_unit_model() -> LatentModel:
    # one unit: u* is pinned at zero and phi is not identified, leaving beta0 + v / sqrt(tau)
    Q = sparse.diags([1.0, BETA0_PRECISION], format="csr")

    def build(theta):
        s = float(np.exp(theta[0]))
        return LatentSpec(Q=Q, design=sparse.csr_matrix([[s, 1.0]]), targets=sparse.csr_matrix([[s, 1.0]]),
                          logdet_prior=float(np.log(BETA0_PRECISION)))

    def log_hyper_prior(theta):
        tau = float(np.exp(-2.0 * theta[0]))
        return float(pc_log_prior_tau(tau) + np.log(2.0 * tau))

    return LatentModel(
        n_latent=2,
        build=build,
        log_hyper_prior=log_hyper_prior,
        bounds=np.array([LOG_SD_BOX]),
        theta_init=np.array([np.log(0.5)]),
        names=("log_sd",),
        to_natural=lambda t: {"tau": float(np.exp(-2.0 * t[0]))},
        intercept_index=1,
    )


def fit_bym(y, p, structure: IcarStructure, phi_prior="pc", thresholds=(), n_samples=0,
            seed=0) -> FitResult:
    """Unit-level BYM2 fit; targets are the N unit log-risks."""
    y = np.asarray(y)
    if len(y) != structure.n or len(p) != structure.n:
        raise DomainError("counts/populations do not match the number of units")
    model = bym_model(structure, phi_prior)
    res = fit_latent_model(model, PoissonObs(y, p), thresholds=thresholds,
                           n_samples=n_samples, seed=seed)
    res.diagnostics["model"] = "bym"
    return res


@dataclass(frozen=True)
class LgcpSetup:
    """Mesh, FEM operator and projectors shared by every LGCP fit on one grid."""

    mesh: Mesh
    operator: SpdeOperator
    A_cells: sparse.csr_matrix
    grid: EvalGrid

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes


def prepare_lgcp(grid: EvalGrid, spacing: float = 1500.0, extension: float | None = None,
                 lattice: str = "equilateral") -> LgcpSetup:
    if extension is None:
        extension = 0.25 * grid.window.diameter
    mesh = build_mesh(grid.window, spacing, extension, lattice)
    op = SpdeOperator(assemble_fem(mesh))
    return LgcpSetup(mesh, op, projector(mesh, grid.centroids()), grid)


def lgcp_model(setup: LgcpSetup, range0=30000.0, p_range=0.5, sigma0=1.0, p_sigma=0.01) -> LatentModel:
    """Latent ``(z, beta0)`` on mesh nodes; theta = (log rho, log sigma)."""
    m = setup.n_nodes
    ones = sparse.csr_matrix(np.ones((setup.A_cells.shape[0], 1)))
    D = sparse.hstack([setup.A_cells, ones], format="csr")
    beta = sparse.csr_matrix([[BETA0_PRECISION]])
    lo_rho = np.log(setup.mesh.spacing)
    hi_rho = np.log(10.0 * setup.grid.window.diameter)

    def build(theta):
        h = MaternHyper(float(np.exp(theta[0])), float(np.exp(theta[1])))
        Q = sparse.block_diag([setup.operator.precision(h), beta], format="csr")
        return LatentSpec(Q=Q, design=D, targets=D,
                          logdet_prior=setup.operator.logdet(h) + np.log(BETA0_PRECISION))

    def log_hyper_prior(theta):
        h = MaternHyper(float(np.exp(theta[0])), float(np.exp(theta[1])))
        return float(pc_log_prior_range_sigma(h, range0, p_range, sigma0, p_sigma) + theta[0] + theta[1])

    rho0 = float(np.clip(0.25 * setup.grid.window.diameter, np.exp(lo_rho), np.exp(hi_rho)))
    return LatentModel(
        n_latent=m + 1,
        build=build,
        log_hyper_prior=log_hyper_prior,
        bounds=np.array([(lo_rho, hi_rho), LOG_SD_BOX]),
        theta_init=np.array([np.log(rho0), np.log(0.5)]),
        names=("log_rho", "log_sigma"),
        to_natural=lambda t: {"rho": float(np.exp(t[0])), "sigma": float(np.exp(t[1]))},
        intercept_index=m,
    )


def fit_lgcp(y_cells, p_cells, setup: LgcpSetup, thresholds=(), n_samples=0, seed=0,
             **prior) -> FitResult:
    """Grid-cell Poisson LGCP; targets are all evaluation cells."""
    y_cells = np.asarray(y_cells)
    if len(y_cells) != setup.grid.n_cells or len(p_cells) != setup.grid.n_cells:
        raise DomainError("counts/populations do not match the evaluation grid")
    model = lgcp_model(setup, **prior)
    res = fit_latent_model(model, PoissonObs(y_cells, p_cells), thresholds=thresholds,
                           n_samples=n_samples, seed=seed)
    res.diagnostics["model"] = "lgcp"
    return res


def _fmt(v) -> str:
    return repr(float(v))


def write_fit_csv(res: FitResult, path, target_ids=None) -> None:
    ids = np.arange(res.n_targets) if target_ids is None else np.asarray(target_ids)
    thr = sorted(res.exceedance)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_id", "mean_eta", "sd_eta", "mean_risk", "q025_eta", "q975_eta"]
                   + [f"exc_p@{t!r}" for t in thr])
        for i in range(res.n_targets):
            w.writerow([int(ids[i]), _fmt(res.mean_eta[i]), _fmt(res.sd_eta[i]), _fmt(res.mean_risk[i]),
                        _fmt(res.q025_eta[i]), _fmt(res.q975_eta[i])]
                       + [_fmt(res.exceedance[t][i]) for t in thr])


def read_fit_csv(path) -> tuple[np.ndarray, FitResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty fit file", row=1)
    head = rows[0]
    if head[:6] != ["target_id", "mean_eta", "sd_eta", "mean_risk", "q025_eta", "q975_eta"]:
        raise ParseError(f"unexpected fit header {head}", row=1)
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(head))
    except ValueError as exc:
        raise ParseError(f"malformed fit row: {exc}") from None
    thr = [float(h.split("@", 1)[1]) for h in head[6:]]
    res = FitResult(
        mean_eta=data[:, 1], sd_eta=data[:, 2], q025_eta=data[:, 4], q975_eta=data[:, 5],
        mean_risk=data[:, 3], exceedance={t: data[:, 6 + j] for j, t in enumerate(thr)},
    )
    return data[:, 0].astype(np.int64), res


def write_hyper_csv(res: FitResult, path) -> None:
    h = res.hyper
    names = h.get("names", [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point"] + list(names) + ["log_post", "weight"])
        w.writerow(["mode"] + [_fmt(v) for v in h.get("mode", [])] + ["", ""])
        for j, (pt, lp, wt) in enumerate(zip(h.get("grid_points", []), h.get("grid_log_post", []),
                                             h.get("grid_weights", []))):
            w.writerow([j] + [_fmt(v) for v in pt] + [_fmt(lp), _fmt(wt)])
