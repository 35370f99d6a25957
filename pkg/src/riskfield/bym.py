"""BYM2 latent structure: scaled ICAR precision, mixing weights and PC priors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, sparse

from .errors import DomainError
from .gmrf import ConstraintSet
from .population import AdjacencyGraph, check_connected

PHI_GRID_SIZE = 512


@dataclass(frozen=True)
class IcarStructure:
    """Unscaled ICAR precision ``diag(w+) - W`` and its variance-scaled version.

    ``eigenvalues`` are the N-1 non-zero eigenvalues of ``Q_star``.
    """

    Q_icar: sparse.csr_matrix
    scale_factor: float
    Q_star: sparse.csr_matrix
    constraint: ConstraintSet
    eigenvalues: np.ndarray

    @property
    def n(self) -> int:
        return self.Q_icar.shape[0]

    @property
    def logdet_star(self) -> float:
        """Generalised log-determinant of Q_star on the sum-to-zero subspace."""
        return float(np.log(self.eigenvalues).sum())

    def marginal_variances(self) -> np.ndarray:
        """Constrained marginal variances of the scaled field."""
        return constrained_icar_variances(self.Q_star.toarray())


@dataclass(frozen=True)
class BymHyper:
    tau: float
    phi: float

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if not 0 <= self.phi <= 1:
            raise DomainError("phi must lie in [0, 1]")


def constrained_icar_variances(Q: np.ndarray) -> np.ndarray:
    """diag of the generalised inverse on the sum-to-zero subspace (connected graph)."""
    lam, V = np.linalg.eigh(Q)
    lam, V = lam[1:], V[:, 1:]
    return np.einsum("ij,j,ij->i", V, 1.0 / lam, V)


def icar_precision(g: AdjacencyGraph) -> IcarStructure:
    check_connected(g.W)
    if g.n == 1:
        # the sum-to-zero constraint pins the single effect at zero
        return IcarStructure(sparse.csr_matrix((1, 1)), 1.0, sparse.csr_matrix([[1.0]]),
                             ConstraintSet.sum_to_zero(1), np.zeros(0))
    Q = sparse.csr_matrix(sparse.diags(g.degree) - g.W)
    lam, V = np.linalg.eigh(Q.toarray())
    lam, V = lam[1:], V[:, 1:]
    var = np.einsum("ij,j,ij->i", V, 1.0 / lam, V)
    scale = float(np.exp(np.mean(np.log(var))))
    return IcarStructure(
        Q_icar=Q,
        scale_factor=scale,
        Q_star=sparse.csr_matrix(Q * scale),
        constraint=ConstraintSet.sum_to_zero(g.n),
        eigenvalues=lam * scale,
    )


@dataclass(frozen=True)
class Bym2Latent:
    """Latent ``(v, u*)`` with precision ``blockdiag(I, Q_star)`` and predictor weights."""

    Q: sparse.csr_matrix
    weight_v: float
    weight_u: float
    constraint: ConstraintSet


def bym2_precision(s: IcarStructure, h: BymHyper) -> Bym2Latent:
    n = s.n
    Q = sparse.block_diag([sparse.identity(n), s.Q_star], format="csr")
    a = np.zeros((1, 2 * n))
    a[0, n:] = 1.0
    return Bym2Latent(
        Q=Q,
        weight_v=float(np.sqrt((1.0 - h.phi) / h.tau)),
        weight_u=float(np.sqrt(h.phi / h.tau)),
        constraint=ConstraintSet(a),
    )


def bym2_design(n: int, h: BymHyper, intercept: bool = True) -> sparse.csr_matrix:
    """Rows map ``(v, u*, beta0)`` to unit log-risks."""
    a = np.sqrt((1.0 - h.phi) / h.tau)
    c = np.sqrt(h.phi / h.tau)
    blocks = [a * sparse.identity(n), c * sparse.identity(n)]
    if intercept:
        blocks.append(sparse.csr_matrix(np.ones((n, 1))))
    return sparse.hstack(blocks, format="csr")


def pc_rate(u: float = 1.0, alpha: float = 0.01) -> float:
    """Exponential rate with P(sd > u) = alpha."""
    return -np.log(alpha) / u


def pc_log_prior_tau(tau, u: float = 1.0, alpha: float = 0.01):
    """PC prior for a precision: exponential on 1/sqrt(tau), expressed on tau."""
    tau = np.asarray(tau, dtype=float)
    if (tau <= 0).any():
        raise DomainError("tau must be positive")
    theta = pc_rate(u, alpha)
    out = np.log(theta / 2.0) - 1.5 * np.log(tau) - theta / np.sqrt(tau)
    return float(out) if out.ndim == 0 else out


class PcPriorPhi:
    """Numerical PC prior for the BYM2 mixing parameter.

    Distance from the unstructured base model is ``sqrt(2 KLD(phi))`` with the
    KLD computed from the scaled structure's generalised-inverse spectrum; the
    exponential rate is calibrated so that ``P(phi <= median) = 0.5``. The log
    density is tabulated on a grid and linearly interpolated.
    """

    def __init__(self, s: IcarStructure, median: float = 0.5, size: int = PHI_GRID_SIZE):
        self.gamma = 1.0 / s.eigenvalues
        self.median = median
        self.d1 = float(self.distance(1.0))
        dm = float(self.distance(median))

        def excess(rate):
            return self._cdf_from_distance(dm, rate) - 0.5

        self.rate = float(optimize.bisect(excess, -200.0, 500.0, xtol=1e-12, maxiter=500))
        self.grid = np.linspace(0.0, 1.0, size)
        self.log_table = self._log_density_exact(self.grid)
        dens = np.exp(self.log_table)
        self.cdf_table = np.concatenate(
            [[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(self.grid))]
        )

    def kld(self, phi):
        phi = np.asarray(phi, dtype=float)
        g1 = self.gamma - 1.0
        z = np.multiply.outer(phi, g1)
        return 0.5 * (z - np.log1p(z)).sum(axis=-1)

    def distance(self, phi):
        return np.sqrt(2.0 * np.maximum(self.kld(phi), 0.0))

    def _d_prime(self, phi):
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        g1 = self.gamma - 1.0
        slope0 = np.sqrt(0.5 * (g1**2).sum())
        out = np.empty_like(phi)
        small = phi < 1e-8
        out[small] = slope0
        p = phi[~small]
        kp = 0.5 * (g1**2 * p[:, None] / (1.0 + p[:, None] * g1)).sum(axis=1)
        out[~small] = kp / self.distance(p)
        return out

    def _cdf_from_distance(self, d, rate):
        if abs(rate) < 1e-12:
            return d / self.d1
        return float(np.exp(_log_abs_expm1(-rate * d) - _log_abs_expm1(-rate * self.d1)))

    def _log_density_exact(self, phi):
        phi = np.atleast_1d(phi)
        r = self.rate
        if abs(r) < 1e-12:
            lognorm = -np.log(self.d1)
            return lognorm + np.log(self._d_prime(phi))
        lognorm = np.log(abs(r)) - _log_abs_expm1(-r * self.d1)
        return lognorm - r * self.distance(phi) + np.log(self._d_prime(phi))

    def log_density(self, phi):
        phi = np.asarray(phi, dtype=float)
        if ((phi <= 0) | (phi >= 1)).any():
            raise DomainError("phi must lie in (0, 1)")
        out = np.interp(phi, self.grid, self.log_table)
        return float(out) if out.ndim == 0 else out

    def cdf(self, phi):
        return np.interp(phi, self.grid, self.cdf_table)


def _log_abs_expm1(x):
    """log|exp(x) - 1| without overflow for large x."""
    if x > 30.0:
        return x + np.log1p(-np.exp(-x))
    if x == 0.0:
        return -np.inf
    return float(np.log(abs(np.expm1(x))))


def pc_log_prior_phi(phi, s: IcarStructure | PcPriorPhi):
    prior = s if isinstance(s, PcPriorPhi) else PcPriorPhi(s)
    return prior.log_density(phi)


class UniformPhiPrior:
    """Flat prior on (0, 1) for sensitivity runs."""

    def log_density(self, phi):
        phi = np.asarray(phi, dtype=float)
        if ((phi <= 0) | (phi >= 1)).any():
            raise DomainError("phi must lie in (0, 1)")
        out = np.zeros_like(phi)
        return float(out) if out.ndim == 0 else out
