"""Sparse symmetric precision matrices: factorization, solves, sampling, marginal variances.

Factors use envelope storage under a reverse Cuthill-McKee ordering; nodes
with very high degree (an intercept coupled to every observation, say) are
held out of the ordering and placed last so they only add dense trailing rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _envelope as env
from .errors import DomainError, SingularMatrixError

JITTER = 1e-9


def as_sparse_sym(Q) -> sparse.csr_matrix:
    """Validate a symmetric matrix and return it as CSR."""
    Q = sparse.csr_matrix(Q, dtype=float)
    if Q.shape[0] != Q.shape[1]:
        raise DomainError(f"matrix is not square: {Q.shape}")
    if not np.isfinite(Q.data).all():
        raise DomainError("matrix has non-finite entries")
    asym = abs(Q - Q.T)
    if asym.nnz and asym.max() > 1e-10 * max(1.0, abs(Q).max()):
        raise DomainError("matrix is not symmetric")
    return Q


def fill_reducing_order(Q) -> np.ndarray:
    """RCM ordering with dense rows moved to the end."""
    Q = sparse.csr_matrix(Q)
    n = Q.shape[0]
    pattern = (Q != 0).astype(np.int8)
    pattern = sparse.csr_matrix(pattern + pattern.T)
    degree = np.diff(pattern.indptr)
    cutoff = max(50.0, 10.0 * np.sqrt(n))
    dense = np.flatnonzero(degree > cutoff)
    if len(dense) == 0:
        return np.asarray(reverse_cuthill_mckee(pattern, symmetric_mode=True), dtype=np.int64)
    keep = np.setdiff1d(np.arange(n), dense)
    sub = pattern[keep][:, keep]
    inner = np.asarray(reverse_cuthill_mckee(sparse.csr_matrix(sub), symmetric_mode=True))
    return np.concatenate([keep[inner], dense]).astype(np.int64)


@dataclass(frozen=True)
class ConstraintSet:
    """Hard linear constraints ``A x = 0``."""

    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.size and np.linalg.matrix_rank(A) < A.shape[0]:
            raise DomainError("constraint rows are linearly dependent")
        object.__setattr__(self, "A", A)

    @property
    def k(self) -> int:
        return 0 if self.A.size == 0 else self.A.shape[0]

    @classmethod
    def sum_to_zero(cls, n: int, block: slice | None = None, total: int | None = None):
        """Single sum-to-zero row over ``block`` of a length-``total`` vector."""
        total = n if total is None else total
        a = np.zeros((1, total))
        a[0, block if block is not None else slice(0, n)] = 1.0
        return cls(a)


class CholeskyFactor:
    """Permuted lower factor with ``Q[perm][:, perm] = L L^T``."""

    def __init__(self, n, perm, first, rowptr, vals):
        self.n = n
        self.perm = perm
        self.first = first
        self.rowptr = rowptr
        self.vals = vals

    @cached_property
    def iperm(self) -> np.ndarray:
        ip = np.empty_like(self.perm)
        ip[self.perm] = np.arange(self.n)
        return ip

    @property
    def diag(self) -> np.ndarray:
        return self.vals[self.rowptr[1:] - 1]

    @property
    def nnz(self) -> int:
        return int(self.rowptr[-1])

    def _rhs(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise DomainError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        vec = b.ndim == 1
        work = np.ascontiguousarray(b.reshape(self.n, -1)[self.perm])
        return work, vec

    def _out(self, work, vec):
        x = np.empty_like(work)
        x[self.perm] = work
        return x[:, 0] if vec else x

    def solve(self, b) -> np.ndarray:
        work, vec = self._rhs(b)
        env.forward(self.n, self.first, self.rowptr, self.vals, work)
        env.backward(self.n, self.first, self.rowptr, self.vals, work)
        return self._out(work, vec)

    def solve_Lt(self, z) -> np.ndarray:
        """``x`` with ``L^T P x = z``; maps standard normals to N(0, Q^{-1}) draws."""
        work = np.ascontiguousarray(np.asarray(z, dtype=float).reshape(self.n, -1))
        vec = np.ndim(z) == 1
        env.backward(self.n, self.first, self.rowptr, self.vals, work)
        return self._out(work, vec)

    def logdet(self) -> float:
        return float(2.0 * np.log(self.diag).sum())

    @cached_property
    def _selected(self) -> np.ndarray:
        colptr, colrows = env.column_lists(self.n, self.first)
        return env.selected_inverse(self.n, self.first, self.rowptr, self.vals, colptr, colrows)

    def selected_inverse(self) -> sparse.csr_matrix:
        """Q^{-1} restricted to the factor's envelope, in the original ordering."""
        r, c = env.envelope_coo(self.n, self.first, self.rowptr)
        S = self._selected
        r0, c0 = self.perm[r], self.perm[c]
        off = r != c
        rows = np.concatenate([r0, c0[off]])
        cols = np.concatenate([c0, r0[off]])
        data = np.concatenate([S, S[off]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def in_envelope(self, i, j) -> np.ndarray:
        """Whether the (original-index) pairs are stored by the selected inverse."""
        pi, pj = self.iperm[np.asarray(i)], self.iperm[np.asarray(j)]
        hi, lo = np.maximum(pi, pj), np.minimum(pi, pj)
        return self.first[hi] <= lo


def cholesky(Q, jitter: bool = False, perm: np.ndarray | None = None) -> CholeskyFactor:
    """Envelope Cholesky of a symmetric positive-definite sparse matrix.

    With ``jitter=True`` a diagonal shift of ``1e-9 * mean(diag)`` is added
    before factorizing; otherwise a non-positive pivot raises
    :class:`SingularMatrixError`.
    """
    Q = as_sparse_sym(Q)
    n = Q.shape[0]
    if jitter:
        Q = Q + JITTER * Q.diagonal().mean() * sparse.identity(n, format="csr")
    if perm is None:
        perm = fill_reducing_order(Q)
    Qp = sparse.tril(Q[perm][:, perm], format="csr")
    Qp.sort_indices()
    indptr = Qp.indptr.astype(np.int64)
    indices = Qp.indices.astype(np.int64)
    first, rowptr = env.envelope_layout(n, indptr, indices)
    vals = np.empty(rowptr[n])
    fail = env.factorize(n, indptr, indices, Qp.data.astype(float), first, rowptr, vals)
    if fail >= 0:
        raise SingularMatrixError(f"non-positive pivot at row {int(perm[fail])} of {n}")
    return CholeskyFactor(n, perm, first, rowptr, vals)


def solve(F: CholeskyFactor, b) -> np.ndarray:
    return F.solve(b)


def logdet(F: CholeskyFactor) -> float:
    return F.logdet()


def sample_gaussian(F: CholeskyFactor, mean, seed=None, size: int | None = None) -> np.ndarray:
    """Draw from N(mean, Q^{-1}); ``size`` draws come back as rows."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = 1 if size is None else size
    z = rng.standard_normal((F.n, m))
    x = F.solve_Lt(z) + np.asarray(mean, dtype=float).reshape(F.n, 1)
    return x[:, 0] if size is None else x.T


def _constraint_terms(F: CholeskyFactor, C: ConstraintSet):
    W = F.solve(C.A.T)
    S = C.A @ W
    if np.linalg.cond(S) > 1e14:
        raise DomainError("constraint system A Q^{-1} A^T is singular")
    return W, S


def condition_on_constraints(F: CholeskyFactor, C: ConstraintSet, x) -> np.ndarray:
    """Kriging correction ``x - Q^{-1}A^T (A Q^{-1} A^T)^{-1} A x`` (rows or vector)."""
    if C is None or C.k == 0:
        return np.asarray(x, dtype=float)
    W, S = _constraint_terms(F, C)
    X = np.atleast_2d(x)
    corr = np.linalg.solve(S, C.A @ X.T)
    out = X - (W @ corr).T
    return out[0] if np.ndim(x) == 1 else out


def sample_constrained(F: CholeskyFactor, mean, C: ConstraintSet | None, seed=None,
                       size: int | None = None) -> np.ndarray:
    x = sample_gaussian(F, mean, seed, size)
    return condition_on_constraints(F, C, x)


def selected_inverse_diagonal(F: CholeskyFactor) -> np.ndarray:
    d = np.empty(F.n)
    d[F.perm] = F._selected[F.rowptr[1:] - 1]
    return d


def constrained_variances(F: CholeskyFactor, C: ConstraintSet | None) -> np.ndarray:
    """Marginal variances of N(0, Q^{-1}) conditioned on ``A x = 0``."""
    d = selected_inverse_diagonal(F)
    if C is None or C.k == 0:
        return d
    W, S = _constraint_terms(F, C)
    return d - np.einsum("ij,ij->i", W @ np.linalg.inv(S), W)


def constrained_logdet(F: CholeskyFactor, C: ConstraintSet | None) -> float:
    """log det of Q restricted to the null space of A (orthonormal coordinates)."""
    ld = F.logdet()
    if C is None or C.k == 0:
        return ld
    _, S = _constraint_terms(F, C)
    return ld + np.linalg.slogdet(S)[1] - np.linalg.slogdet(C.A @ C.A.T)[1]
