import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from riskfield.errors import DomainError, SingularMatrixError
from riskfield.gmrf import (
    ConstraintSet,
    cholesky,
    constrained_logdet,
    constrained_variances,
    logdet,
    sample_constrained,
    sample_gaussian,
    selected_inverse_diagonal,
    solve,
)


def random_spd(n, seed, density=0.1, cond=None):
    rng = np.random.default_rng(seed)
    A = sparse.random(n, n, density=density, random_state=rng, data_rvs=rng.standard_normal)
    Q = (A @ A.T).toarray() + np.diag(rng.uniform(0.5, 2.0, n))
    if cond is not None:
        lam, V = np.linalg.eigh(Q)
        lam = np.geomspace(1.0, cond, n)
        Q = (V * lam) @ V.T
        Q = 0.5 * (Q + Q.T)
    return Q


def dense_factor(F):
    n = F.n
    L = np.zeros((n, n))
    for i in range(n):
        a, b = F.rowptr[i], F.rowptr[i + 1]
        L[i, F.first[i]:i + 1] = F.vals[a:b]
    return L


def test_identity_factor():
    F = cholesky(sparse.identity(6))
    assert np.allclose(dense_factor(F), np.eye(6))
    assert logdet(F) == 0.0
    assert np.allclose(solve(F, np.arange(6.0)), np.arange(6.0))
    assert np.allclose(selected_inverse_diagonal(F), 1.0)


def test_two_by_two_logdet():
    F = cholesky(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    assert np.isclose(logdet(F), np.log(3.0), rtol=0, atol=1e-14)


def test_scaled_identity():
    F = cholesky(2.0 * sparse.identity(7))
    assert np.isclose(logdet(F), 7 * np.log(2.0))
    assert np.allclose(solve(F, np.ones(7)), 0.5)
    assert np.allclose(selected_inverse_diagonal(F), 0.5)


def test_diagonal_inverse():
    d = np.array([1.0, 4.0, 0.25, 10.0])
    assert np.allclose(selected_inverse_diagonal(cholesky(sparse.diags(d))), 1.0 / d)


@pytest.mark.parametrize("n,seed", [(50, 0), (50, 1), (120, 2)])
def test_reconstruction(n, seed):
    Q = random_spd(n, seed)
    F = cholesky(Q)
    L = dense_factor(F)
    Qp = Q[np.ix_(F.perm, F.perm)]
    assert np.linalg.norm(L @ L.T - Qp) <= 1e-10 * np.linalg.norm(Qp)


def test_reconstruction_ill_conditioned():
    Q = random_spd(60, 5, cond=1e8)
    F = cholesky(Q)
    L = dense_factor(F)
    Qp = Q[np.ix_(F.perm, F.perm)]
    assert np.linalg.norm(L @ L.T - Qp) <= 1e-10 * np.linalg.norm(Qp)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 200), seed=st.integers(0, 2**31))
def test_logdet_and_solve_match_dense(n, seed):
    Q = random_spd(n, seed, density=min(1.0, 3.0 / n))
    F = cholesky(Q)
    assert np.isclose(logdet(F), np.linalg.slogdet(Q)[1], rtol=1e-10, atol=1e-9)
    b = np.random.default_rng(seed).standard_normal(n)
    x = solve(F, b)
    assert np.linalg.norm(Q @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_selected_inverse_vs_dense():
    Q = random_spd(100, 9, density=0.04)
    F = cholesky(Q)
    Sd = np.linalg.inv(Q)
    assert np.abs(selected_inverse_diagonal(F) - np.diag(Sd)).max() <= 1e-8
    S = F.selected_inverse().tocoo()
    assert np.abs(S.data - Sd[S.row, S.col]).max() <= 1e-8


def test_singular_raises_and_jitter():
    Q = np.array([[1.0, -1.0], [-1.0, 1.0]])
    with pytest.raises(SingularMatrixError):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    F = cholesky(Q, jitter=True)
    assert np.isfinite(logdet(F))


def test_dimension_mismatch():
    F = cholesky(sparse.identity(3))
    with pytest.raises(DomainError):
        solve(F, np.ones(4))
    with pytest.raises(DomainError):
        cholesky(np.ones((2, 3)))
    with pytest.raises(DomainError):
        cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))


def test_sample_identity_covariance():
    F = cholesky(sparse.identity(3))
    X = sample_gaussian(F, np.zeros(3), seed=1, size=10_000)
    assert np.abs(np.cov(X.T) - np.eye(3)).max() <= 4 / np.sqrt(10_000)


def test_sample_mean_shift():
    Q = random_spd(10, 3)
    F = cholesky(Q)
    m = np.arange(10.0)
    assert np.allclose(sample_gaussian(F, m, seed=4) - sample_gaussian(F, 0 * m, seed=4), m, atol=1e-12)


def test_sample_one_dim():
    F = cholesky(np.array([[4.0]]))
    x = sample_gaussian(F, [0.0], seed=2, size=10_000)
    assert abs(x.std() - 0.5) <= 4 * 0.5 / np.sqrt(2 * 10_000)


def test_sample_covariance_general():
    Q = random_spd(5, 12, density=0.5)
    F = cholesky(Q)
    X = sample_gaussian(F, np.zeros(5), seed=8, size=40_000)
    S = np.linalg.inv(Q)
    se = np.sqrt((S**2 + np.outer(np.diag(S), np.diag(S))) / 40_000)
    assert (np.abs(np.cov(X.T) - S) <= 5 * se).all()


def test_constrained_no_constraints_equals_plain():
    F = cholesky(random_spd(8, 1))
    a = sample_constrained(F, np.zeros(8), ConstraintSet(np.zeros((0, 8))), seed=3)
    b = sample_gaussian(F, np.zeros(8), seed=3)
    assert np.array_equal(a, b)
    assert np.array_equal(sample_constrained(F, np.zeros(8), None, seed=3), b)


def test_constrained_sum_to_zero():
    F = cholesky(sparse.identity(6))
    C = ConstraintSet.sum_to_zero(6)
    X = sample_constrained(F, np.zeros(6), C, seed=5, size=50)
    assert np.abs(X.sum(axis=1)).max() <= 1e-10


def test_constrained_covariance_three():
    F = cholesky(sparse.identity(3))
    C = ConstraintSet.sum_to_zero(3)
    X = sample_constrained(F, np.zeros(3), C, seed=6, size=10_000)
    target = np.eye(3) - np.ones((3, 3)) / 3
    assert np.abs(np.cov(X.T) - target).max() <= 4 / np.sqrt(10_000)
    assert np.allclose(constrained_variances(F, C), np.diag(target))


def test_constrained_variances_general():
    Q = random_spd(7, 21, density=0.5)
    A = np.random.default_rng(0).standard_normal((2, 7))
    C = ConstraintSet(A)
    S = np.linalg.inv(Q)
    Sc = S - S @ A.T @ np.linalg.solve(A @ S @ A.T, A @ S)
    F = cholesky(Q)
    assert np.allclose(constrained_variances(F, C), np.diag(Sc), atol=1e-12)
    # log det of Q on the null space of A, via an orthonormal basis
    from scipy.linalg import null_space
    B = null_space(A)
    ld = -np.linalg.slogdet(B.T @ Sc @ B)[1]
    assert np.isclose(constrained_logdet(F, C), ld, atol=1e-10)


def test_dependent_constraints_rejected():
    with pytest.raises(DomainError):
        ConstraintSet(np.array([[1.0, 1.0], [2.0, 2.0]]))
