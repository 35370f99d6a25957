"""Laplace-approximation engine for latent Gaussian models with two-level structure.

The latent vector ``x`` has prior ``N(0, Q(theta)^{-1})`` (optionally with hard
linear constraints), observations enter through a linear predictor
``eta = D x`` and hyperparameters ``theta`` (in an unconstrained internal
parametrisation) are integrated over a small grid around their posterior mode.
Latent marginals are Gaussian mixtures over that grid.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize, sparse
from scipy.special import gammaln, ndtr

from .errors import DomainError, FitError, SingularMatrixError
from .gmrf import (
    CholeskyFactor,
    ConstraintSet,
    cholesky,
    condition_on_constraints,
    constrained_logdet,
    fill_reducing_order,
    sample_constrained,
)

log = logging.getLogger(__name__)

GRAD_TOL = 1e-6
STEP_TOL = 1e-8
MAX_NEWTON = 100
MAX_HALVINGS = 30
HYPER_XTOL = 1e-4
GRID_DROP = 1e-3
FALLBACK_SPACING = 0.5
SKEW_CLIP = (0.5, 2.0)


class PoissonObs:
    """Counts ``y`` with exposure ``E``; rows with ``E = 0`` carry no information."""

    def __init__(self, counts, offsets):
        y = np.asarray(counts, dtype=float)
        E = np.asarray(offsets, dtype=float)
        if y.shape != E.shape:
            raise DomainError("counts and offsets differ in length")
        if (y < 0).any() or (y != np.round(y)).any():
            raise DomainError("counts must be non-negative integers")
        if (E < 0).any():
            raise DomainError("offsets must be non-negative")
        self.counts, self.offsets = y, E
        self.active = E > 0
        self._y, self._E = y[self.active], E[self.active]
        self._const = -gammaln(self._y + 1.0).sum() + (self._y * np.log(self._E)).sum()

    def __len__(self):
        return len(self.counts)

    def derivatives(self, eta):
        """Log-likelihood, its gradient and negative second derivative in eta."""
        mu = self._E * np.exp(eta)
        ll = float((self._y * eta - mu).sum() + self._const)
        return ll, self._y - mu, mu

    def initial_level(self) -> float:
        return float(np.log((self._y.sum() + 0.5) / self._E.sum()))


class GaussianObs:
    """Gaussian observations ``y ~ N(eta, noise_var)``; used for exactness checks."""

    def __init__(self, y, noise_var):
        self.counts = np.asarray(y, dtype=float)
        self.noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), self.counts.shape)
        self.active = np.ones(len(self.counts), dtype=bool)
        self._y = self.counts

    def __len__(self):
        return len(self.counts)

    def derivatives(self, eta):
        r = self._y - eta
        v = self.noise_var
        ll = float(-0.5 * (np.log(2 * np.pi * v) + r**2 / v).sum())
        return ll, r / v, 1.0 / v

    def initial_level(self) -> float:
        return float(np.mean(self._y))


@dataclass
class LatentSpec:
    """Everything the engine needs at one hyperparameter value."""

    Q: sparse.csr_matrix
    design: sparse.csr_matrix
    constraint: Optional[ConstraintSet] = None
    targets: Optional[sparse.csr_matrix] = None
    logdet_prior: Optional[float] = None


@dataclass
class LatentModel:
    """Prior builder, hyperprior and search box in internal coordinates."""

    n_latent: int
    build: Callable[[np.ndarray], LatentSpec]
    log_hyper_prior: Callable[[np.ndarray], float]
    bounds: np.ndarray
    theta_init: np.ndarray
    names: tuple = ()
    to_natural: Callable[[np.ndarray], dict] = lambda t: {}
    intercept_index: Optional[int] = None

    def ordering(self, M) -> np.ndarray:
        """Fill-reducing permutation, cached per sparsity pattern."""
        cache = self.__dict__.setdefault("_orderings", {})
        key = hash((M.shape, M.indptr.tobytes(), M.indices.tobytes()))
        if key not in cache:
            cache[key] = fill_reducing_order(M)
        return cache[key]

    def initial_latent(self, obs) -> np.ndarray:
        x = np.zeros(self.n_latent)
        if self.intercept_index is not None:
            x[self.intercept_index] = obs.initial_level()
        return x

    def in_box(self, theta) -> bool:
        t = np.asarray(theta)
        return bool(((t >= self.bounds[:, 0]) & (t <= self.bounds[:, 1])).all())


@dataclass
class GaussianApprox:
    theta: np.ndarray
    mode: np.ndarray
    factor: CholeskyFactor
    spec: LatentSpec
    loglik: float
    quad: float
    iterations: int

    @property
    def constraint(self):
        return self.spec.constraint


def _active_design(spec: LatentSpec, obs):
    D = sparse.csr_matrix(spec.design)
    if D.shape[0] != len(obs):
        raise DomainError(f"design has {D.shape[0]} rows for {len(obs)} observations")
    return D[obs.active] if not obs.active.all() else D


def _factor_posterior(H, C, model=None):
    H = sparse.csr_matrix(H)
    H.sort_indices()
    perm = model.ordering(H) if model is not None else None
    try:
        return cholesky(H, perm=perm)
    except SingularMatrixError:
        if C is None or C.k == 0:
            raise
        # A^T A leaves the constrained density unchanged and fixes the null direction
        return cholesky(H + sparse.csr_matrix(C.A.T @ C.A))


def _project(g, C):
    if C is None or C.k == 0:
        return g
    A = C.A
    return g - A.T @ np.linalg.solve(A @ A.T, A @ g)


def gaussian_approx(model: LatentModel, obs, theta, x0=None) -> GaussianApprox:
    """Newton iterations for the conditional mode of ``x`` given ``theta``."""
    theta = np.asarray(theta, dtype=float)
    spec = model.build(theta)
    Q = sparse.csr_matrix(spec.Q)
    C = spec.constraint
    D = _active_design(spec, obs)
    Dt = D.T.tocsr()
    x = model.initial_latent(obs) if x0 is None else np.array(x0, dtype=float)
    if C is not None and C.k:
        x = x - C.A.T @ np.linalg.solve(C.A @ C.A.T, C.A @ x)

    def objective(v):
        ll, g, w = obs.derivatives(D @ v)
        return ll - 0.5 * v @ (Q @ v), ll, g, w

    f, ll, g_eta, w = objective(x)
    for it in range(1, MAX_NEWTON + 1):
        grad = Dt @ g_eta - Q @ x
        H = Q + Dt @ sparse.diags(w) @ D
        try:
            F = _factor_posterior(H, C, model)
        except SingularMatrixError as exc:
            raise FitError(f"posterior precision not positive definite: {exc}", theta) from exc
        target = condition_on_constraints(F, C, x + F.solve(grad))
        step = target - x
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = x + t * step
            fc, llc, gc, wc = objective(cand)
            if np.isfinite(fc) and fc >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            raise FitError("step halving failed to increase the objective", theta)
        x, f, ll, g_eta, w = cand, fc, llc, gc, wc
        pgrad = _project(Dt @ g_eta - Q @ x, C)
        if np.abs(pgrad).max() <= GRAD_TOL or np.linalg.norm(t * step) <= STEP_TOL:
            break
    else:
        raise FitError(f"Newton did not converge in {MAX_NEWTON} iterations", theta)
    H = Q + Dt @ sparse.diags(w) @ D
    F = _factor_posterior(H, C, model)
    return GaussianApprox(theta, x, F, spec, ll, float(x @ (Q @ x)), it)


def prior_logdet(spec: LatentSpec, model: LatentModel | None = None) -> float:
    if spec.logdet_prior is not None:
        return spec.logdet_prior
    Q = sparse.csr_matrix(spec.Q)
    Q.sort_indices()
    perm = model.ordering(Q) if model is not None else None
    return constrained_logdet(cholesky(Q, perm=perm), spec.constraint)


def laplace_log_marginal(model: LatentModel, obs, theta, ga: GaussianApprox | None = None) -> float:
    """Laplace approximation to log p(y | theta)."""
    if ga is None:
        ga = gaussian_approx(model, obs, theta)
    post = constrained_logdet(ga.factor, ga.constraint)
    val = ga.loglik - 0.5 * ga.quad + 0.5 * prior_logdet(ga.spec, model) - 0.5 * post
    if not np.isfinite(val):
        raise FitError("non-finite Laplace approximation", theta)
    return float(val)


class _Evaluator:
    """Log posterior of theta with warm-started inner Newton and memoisation."""

    def __init__(self, model, obs):
        self.model, self.obs = model, obs
        self.cache: dict = {}
        self.x_last = None
        self.n_evals = 0

    def __call__(self, theta):
        key = tuple(np.round(np.asarray(theta, dtype=float), 12))
        if key in self.cache:
            return self.cache[key][0]
        self.n_evals += 1
        try:
            ga = gaussian_approx(self.model, self.obs, theta, self.x_last)
            lp = laplace_log_marginal(self.model, self.obs, theta, ga) + self.model.log_hyper_prior(
                np.asarray(theta)
            )
            self.x_last = ga.mode
        except FitError as exc:
            log.debug("evaluation failed: %s", exc)
            ga, lp = None, -np.inf
        self.cache[key] = (lp, ga)
        return lp

    def approx(self, theta):
        self(theta)
        return self.cache[tuple(np.round(np.asarray(theta, dtype=float), 12))][1]


@dataclass
class HyperOptResult:
    theta: np.ndarray
    log_post: float
    n_evals: int
    clipped: bool
    warnings: list = field(default_factory=list)


def optimize_hyper(model: LatentModel, obs, theta_init=None, evaluator=None) -> HyperOptResult:
    """Nelder-Mead on the log posterior of theta within the search box."""
    ev = evaluator or _Evaluator(model, obs)
    lo, hi = model.bounds[:, 0], model.bounds[:, 1]
    t0 = np.asarray(model.theta_init if theta_init is None else theta_init, dtype=float)
    warnings = []
    if not model.in_box(t0):
        warnings.append("initial theta outside search box; clipped")
        t0 = np.clip(t0, lo, hi)
    d = len(t0)
    simplex = [t0]
    for j in range(d):
        v = t0.copy()
        v[j] = v[j] + 0.5 if v[j] + 0.5 <= hi[j] else v[j] - 0.5
        simplex.append(v)
    res = optimize.minimize(
        lambda t: -ev(np.clip(t, lo, hi)),
        t0,
        method="Nelder-Mead",
        bounds=list(zip(lo, hi)),
        options={"xatol": HYPER_XTOL, "fatol": 1e-8, "initial_simplex": np.array(simplex),
                 "maxfev": 400 * d},
    )
    theta = np.clip(res.x, lo, hi)
    val = ev(theta)
    if not np.isfinite(val):
        raise FitError("no finite log posterior found in the search box", theta)
    edge = np.isclose(theta, lo, atol=1e-6) | np.isclose(theta, hi, atol=1e-6)
    if edge.any():
        warnings.append(f"theta mode on search-box edge for {np.flatnonzero(edge).tolist()}")
        log.warning("hyperparameter mode at search-box boundary: %s", theta)
    return HyperOptResult(theta, val, ev.n_evals, bool(edge.any()), warnings)


@dataclass
class HyperGrid:
    points: np.ndarray
    log_post: np.ndarray
    weights: np.ndarray
    approx: list
    warnings: list = field(default_factory=list)
    hessian_ok: bool = True


def fd_hessian(f, x, h=0.05):
    x = np.asarray(x, dtype=float)
    d = len(x)
    f0 = f(x)
    Hm = np.empty((d, d))
    e = np.eye(d) * h
    for i in range(d):
        Hm[i, i] = (f(x + e[i]) - 2 * f0 + f(x - e[i])) / h**2
        for j in range(i):
            v = (f(x + e[i] + e[j]) - f(x + e[i] - e[j]) - f(x - e[i] + e[j]) + f(x - e[i] - e[j]))
            Hm[i, j] = Hm[j, i] = v / (4 * h**2)
    return Hm


def _half_axis_scales(ev, model, theta_mode, steps, lp0):
    """Per-direction stretch for the positive and negative half-axes.

    A Gaussian log-posterior drops by exactly 1 at z = +-sqrt(2); the observed
    drop there rescales each half-axis so skewed posteriors are not truncated.
    """
    d = steps.shape[1]
    scales = np.ones((d, 2))
    z = np.sqrt(2.0)
    for j in range(d):
        for k, sgn in enumerate((1.0, -1.0)):
            t = theta_mode + sgn * z * steps[:, j]
            if not model.in_box(t):
                continue
            drop = lp0 - ev(t)
            if np.isfinite(drop) and drop > 0:
                scales[j, k] = float(np.clip(np.sqrt(1.0 / drop), SKEW_CLIP[0], SKEW_CLIP[1]))
    return scales


def explore_grid(model: LatentModel, obs, theta_mode, evaluator=None, half_width: int = 2,
                 skew_correction: bool = False) -> HyperGrid:
    """Regular grid in standardised coordinates around the mode (one sd per step).

    With ``skew_correction`` the step length on each side of the mode is
    stretched by the asymmetry of the log-posterior along that direction; the
    integration weights then carry the matching cell volumes.
    """
    ev = evaluator or _Evaluator(model, obs)
    theta_mode = np.asarray(theta_mode, dtype=float)
    d = len(theta_mode)
    warnings = []
    Hm = fd_hessian(ev, theta_mode)
    ok = np.isfinite(Hm).all() and np.all(np.linalg.eigvalsh(-Hm) > 0) if np.isfinite(Hm).all() else False
    if ok:
        lam, V = np.linalg.eigh(np.linalg.inv(-Hm))
        steps = V * np.sqrt(lam)
    else:
        warnings.append("log-posterior Hessian not negative definite; fixed grid spacing used")
        log.warning("Hessian not negative definite at %s; using fixed spacing", theta_mode)
        steps = np.eye(d) * FALLBACK_SPACING
    scales = np.ones((d, 2))
    if ok and skew_correction:
        scales = _half_axis_scales(ev, model, theta_mode, steps, ev(theta_mode))
    ticks = np.arange(-half_width, half_width + 1)
    zs = np.array(np.meshgrid(*([ticks] * d), indexing="ij")).reshape(d, -1).T
    pts, lps, gas, vols = [], [], [], []
    dropped = 0
    for z in zs:
        sc = np.where(z > 0, scales[:, 0], np.where(z < 0, scales[:, 1], 1.0))
        t = theta_mode + steps @ (z * sc)
        if not model.in_box(t):
            dropped += 1
            continue
        lp = ev(t)
        if not np.isfinite(lp):
            dropped += 1
            continue
        # cell volume in standardised coordinates; the centre cell straddles both sides
        vol = np.where(z == 0, 0.5 * (scales[:, 0] + scales[:, 1]), sc)
        pts.append(t)
        lps.append(lp)
        gas.append(ev.approx(t))
        vols.append(float(np.prod(vol)))
    if dropped:
        warnings.append(f"{dropped} grid points outside the box or failed")
    lps = np.array(lps)
    w = np.exp(lps - lps.max()) * np.array(vols)
    keep = w >= GRID_DROP * w.max()
    w = w[keep]
    w = w / w.sum()
    pts = np.array(pts)[keep]
    gas = [g for g, k in zip(gas, keep) if k]
    return HyperGrid(pts, lps[keep], w, gas, warnings, bool(ok))


@dataclass
class FitResult:
    """Posterior summaries of target linear predictors."""

    mean_eta: np.ndarray
    sd_eta: np.ndarray
    q025_eta: np.ndarray
    q975_eta: np.ndarray
    mean_risk: np.ndarray
    exceedance: dict
    samples: Optional[np.ndarray] = None
    hyper: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    component_means: Optional[np.ndarray] = None
    component_sds: Optional[np.ndarray] = None
    component_weights: Optional[np.ndarray] = None

    @property
    def n_targets(self) -> int:
        return len(self.mean_eta)

    def exceedance_prob(self, threshold: float) -> np.ndarray:
        """Pr(risk > threshold) from the stored mixture components."""
        if threshold <= 0:
            raise DomainError("exceedance threshold must be positive")
        if self.component_means is None:
            return self.exceedance[threshold]
        return mixture_exceedance(self.component_means, self.component_sds,
                                  self.component_weights, np.log(threshold))


def mixture_exceedance(means, sds, weights, level):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sds > 0, (means - level) / np.where(sds > 0, sds, 1.0),
                     np.where(means > level, np.inf, -np.inf))
    return np.clip(weights @ ndtr(z), 0.0, 1.0)


def mixture_quantile(means, sds, weights, p, iters=80):
    lo = (means - 10 * sds).min(axis=0) - 1e-9
    hi = (means + 10 * sds).max(axis=0) + 1e-9
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cdf = 1.0 - mixture_exceedance(means, sds, weights, mid)
        below = cdf < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _target_moments(ga: GaussianApprox, T):
    F = ga.factor
    mean = T @ ga.mode
    # every pair of latent indices sharing a target row must be in the factor envelope:
    # the envelope start of each entry must reach the row's smallest permuted index
    nz = np.diff(T.indptr) > 0
    if nz.any():
        pidx = F.iperm[T.indices]
        rowmin = np.minimum.reduceat(pidx, T.indptr[:-1][nz])
        rowmin = np.repeat(rowmin, np.diff(T.indptr)[nz])
        if (F.first[pidx] > rowmin).any():
            raise FitError("target rows couple latent entries outside the factor envelope", ga.theta)
    S = F.selected_inverse()
    var = np.asarray((T @ S).multiply(T).sum(axis=1)).ravel()
    C = ga.constraint
    if C is not None and C.k:
        W = F.solve(C.A.T)
        V = T @ W
        var = var - np.einsum("ij,ij->i", V @ np.linalg.inv(C.A @ W), V)
    return mean, np.sqrt(np.maximum(var, 0.0))


def predictor_marginals(model: LatentModel, obs, grid: HyperGrid, targets=None,
                        thresholds=(), n_samples: int = 0, seed: int = 0) -> FitResult:
    """Gaussian-mixture marginals of target predictors over the hyper grid."""
    thresholds = [float(t) for t in thresholds]
    if any(t <= 0 for t in thresholds):
        raise DomainError("exceedance thresholds must be positive")
    means, sds, Ts = [], [], []
    for ga in grid.approx:
        T = targets if targets is not None else (ga.spec.targets if ga.spec.targets is not None else ga.spec.design)
        T = sparse.csr_matrix(T)
        m, s = _target_moments(ga, T)
        means.append(m)
        sds.append(s)
        Ts.append(T)
    M, S, w = np.array(means), np.array(sds), grid.weights
    mean_eta = w @ M
    var_eta = w @ (S**2 + M**2) - mean_eta**2
    with np.errstate(over="ignore"):
        # unbounded when an sd on the log scale is huge (e.g. all-zero counts)
        mean_risk = w @ np.exp(M + 0.5 * S**2)
    exc = {t: mixture_exceedance(M, S, w, np.log(t)) for t in thresholds}
    samples = None
    if n_samples:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7919])))
        counts = rng.multinomial(n_samples, w)
        blocks = []
        for ga, T, k in zip(grid.approx, Ts, counts):
            if k == 0:
                continue
            X = sample_constrained(ga.factor, ga.mode, ga.constraint, rng, size=int(k))
            blocks.append(np.asarray(T @ X.T).T)
        samples = np.vstack(blocks)
    return FitResult(
        mean_eta=mean_eta,
        sd_eta=np.sqrt(np.maximum(var_eta, 0.0)),
        q025_eta=mixture_quantile(M, S, w, 0.025),
        q975_eta=mixture_quantile(M, S, w, 0.975),
        mean_risk=mean_risk,
        exceedance=exc,
        samples=samples,
        component_means=M,
        component_sds=S,
        component_weights=w,
    )


def fit_latent_model(model: LatentModel, obs, targets=None, thresholds=(), n_samples=0,
                     seed=0, theta_init=None) -> FitResult:
    """Mode search, grid exploration and marginals in one call."""
    t0 = time.perf_counter()
    ev = _Evaluator(model, obs)
    opt = optimize_hyper(model, obs, theta_init, evaluator=ev)
    grid = explore_grid(model, obs, opt.theta, evaluator=ev)
    res = predictor_marginals(model, obs, grid, targets, thresholds, n_samples, seed)
    res.hyper = {
        "names": list(model.names),
        "mode": opt.theta.tolist(),
        "mode_natural": model.to_natural(opt.theta),
        "grid_points": grid.points.tolist(),
        "grid_weights": grid.weights.tolist(),
        "grid_log_post": grid.log_post.tolist(),
    }
    res.diagnostics = {
        "hyper_evaluations": ev.n_evals,
        "grid_size": int(len(grid.weights)),
        "newton_iterations_at_mode": int(ev.approx(opt.theta).iterations),
        "clipped": opt.clipped,
        "hessian_ok": grid.hessian_ok,
        "warnings": opt.warnings + grid.warnings,
        "runtime_s": time.perf_counter() - t0,
    }
    return res
