import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from riskfield.errors import ConfigurationError, DomainError
from riskfield.gmrf import cholesky
from riskfield.population import Window
from riskfield.spde import (
    MaternHyper,
    Mesh,
    SpdeOperator,
    assemble_fem,
    build_mesh,
    matern_covariance,
    pc_log_prior_range_sigma,
    projector,
    spde_precision,
    write_mesh_csv,
)

# x K_1(x) at x = sqrt(8), evaluated with mpmath
CORR_AT_RANGE = 0.139667474015293


def test_unit_square_square_lattice():
    m = build_mesh(Window(0, 0, 1, 1), 1.0, 0.0, lattice="square")
    assert m.n_nodes == 4 and len(m.triangles) == 2


def test_square_lattice_count():
    m = build_mesh(Window(0, 0, 12000, 9000), 1500.0, 0.0, lattice="square")
    assert m.n_nodes == (12000 / 1500 + 1) * (9000 / 1500 + 1)


def test_mesh_validity():
    win = Window(0, 0, 20000, 15000)
    m = build_mesh(win, 1500.0, 5000.0)
    assert (m.areas() > 1e-12).all()
    assert np.isclose(m.areas().sum(), m.outer.area, rtol=1e-9)
    # conforming: every interior edge shared by exactly two triangles
    e = np.sort(np.concatenate([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}
    assert m.interior.sum() > 0
    with pytest.raises(ConfigurationError):
        build_mesh(win, 0.0)
    with pytest.raises(ConfigurationError):
        build_mesh(win, 100.0, -1.0)


def right_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return Mesh(nodes, np.array([[0, 1, 2]]), np.ones(3, bool), Window(0, 0, 1, 1), 1.0, 0.0)


def test_element_oracle():
    fem = assemble_fem(right_triangle())
    assert np.allclose(fem.C, 1 / 6)
    G = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    assert np.allclose(fem.G.toarray(), G, atol=1e-15)


def test_degenerate_triangle():
    m = right_triangle()
    bad = Mesh(m.nodes, np.array([[0, 2, 1]]), m.interior, m.window, 1.0, 0.0)
    with pytest.raises(DomainError):
        assemble_fem(bad)


def test_fem_invariants():
    m = build_mesh(Window(0, 0, 9000, 7000), 800.0, 2000.0)
    fem = assemble_fem(m)
    assert np.abs(np.asarray(fem.G.sum(axis=1)).ravel()).max() <= 1e-12
    assert (fem.C > 0).all()
    assert np.isclose(fem.C.sum(), m.outer.area, rtol=1e-9)
    assert np.linalg.eigvalsh(fem.G.toarray()).min() > -1e-10


def test_kappa_and_correlation_at_range():
    h = MaternHyper(30000.0, 1.0)
    assert np.isclose(h.kappa, 9.42809041582063e-5, rtol=1e-12)
    assert np.isclose(matern_covariance(30000.0, h), CORR_AT_RANGE, rtol=1e-12)
    assert matern_covariance(0.0, MaternHyper(1.0, 2.0)) == 4.0
    v = matern_covariance(np.linspace(0, 1e5, 200), h)
    assert (np.diff(v) < 0).all()


def test_precision_sigma_scaling():
    fem = assemble_fem(build_mesh(Window(0, 0, 5000, 5000), 1000.0, 1000.0))
    Q1 = spde_precision(fem, MaternHyper(3000.0, 1.0))
    Q2 = spde_precision(fem, MaternHyper(3000.0, 2.0))
    assert np.allclose(Q2.toarray(), Q1.toarray() / 4, rtol=1e-12, atol=0)


def test_operator_matches_direct_and_logdet():
    m = build_mesh(Window(0, 0, 8000, 6000), 1000.0, 2000.0)
    fem = assemble_fem(m)
    op = SpdeOperator(fem)
    for h in (MaternHyper(3000.0, 1.0), MaternHyper(20000.0, 0.3)):
        Q = spde_precision(fem, h)
        assert abs(op.precision(h) - Q).max() <= 1e-12 * abs(Q).max()
        assert np.isclose(op.logdet(h), np.linalg.slogdet(Q.toarray())[1], rtol=1e-10)
        cholesky(Q)  # SPD without jitter


def _covariance_errors(spacing, rho=3000.0):
    h = MaternHyper(rho, 1.0)
    m = build_mesh(Window(0, 0, 4 * rho, 4 * rho), spacing, 2 * rho)
    F = cholesky(spde_precision(assemble_fem(m), h))
    c = np.array([2 * rho, 2 * rho])
    i0 = int(np.argmin(np.linalg.norm(m.nodes - c, axis=1)))
    e = np.zeros(m.n_nodes)
    e[i0] = 1.0
    col = F.solve(e)
    out = []
    for d in (600.0, 1200.0, 1800.0, 2400.0, 3000.0):
        j = int(np.argmin(np.linalg.norm(m.nodes - (m.nodes[i0] + [d, 0.0]), axis=1)))
        dd = np.linalg.norm(m.nodes[j] - m.nodes[i0])
        assert np.isclose(dd, d)
        out.append(abs(col[j] / matern_covariance(dd, h) - 1))
    return np.array(out)


def test_covariance_recovery_and_refinement():
    coarse = _covariance_errors(600.0)
    fine = _covariance_errors(300.0)
    assert coarse.max() < 0.05
    assert fine.max() < coarse.max()


def test_projector_basic():
    m = build_mesh(Window(0, 0, 4000, 3000), 1000.0, 500.0)
    A = projector(m, m.nodes[[3, 10]])
    assert np.allclose(A.toarray()[0, 3], 1.0) and A[0].nnz == 1
    cen = m.nodes[m.triangles[5]].mean(axis=0)
    row = projector(m, cen[None]).toarray()[0]
    assert np.allclose(row[m.triangles[5]], 1 / 3)
    with pytest.raises(DomainError):
        projector(m, [[1e6, 1e6]])


@settings(max_examples=30, deadline=None)
@given(pts=st.lists(st.tuples(st.floats(-500, 4500), st.floats(-500, 3500)), min_size=1, max_size=20),
       a=st.floats(-5, 5), b=st.floats(-1e-3, 1e-3), c=st.floats(-1e-3, 1e-3))
def test_projector_reproduces_linear(pts, a, b, c):
    m = build_mesh(Window(0, 0, 4000, 3000), 1000.0, 500.0)
    p = np.array(pts)
    A = projector(m, p)
    f = a + b * m.nodes[:, 0] + c * m.nodes[:, 1]
    assert np.allclose(A @ f, a + b * p[:, 0] + c * p[:, 1], atol=1e-9)
    d = A.toarray()
    assert (d >= 0).all() and np.allclose(d.sum(axis=1), 1.0) and ((d > 0).sum(axis=1) <= 3).all()


def _prior(r, s):
    return np.exp(pc_log_prior_range_sigma(MaternHyper(r, s)))


def _mass(u_lo, u_hi, s_lo, s_hi):
    # over u = log(range); the range tail beyond e^30 holds ~2e-9 of the mass
    f = lambda s, u: _prior(np.exp(u), s) * np.exp(u)
    return integrate.dblquad(f, u_lo, u_hi, s_lo, s_hi, epsabs=1e-13, epsrel=1e-12)[0]


def test_pc_range_sigma_calibration():
    p_rho = _mass(np.log(100.0), np.log(30000.0), 0.0, np.inf)
    assert abs(p_rho - 0.5) <= 1e-6
    p_sig = _mass(np.log(100.0), np.log(30000.0), 1.0, np.inf) + _mass(np.log(30000.0), 30.0, 1.0, np.inf)
    assert abs(p_sig - 0.01) <= 1e-6


@given(r1=st.floats(100, 1e6), r2=st.floats(100, 1e6), s1=st.floats(0.01, 10), s2=st.floats(0.01, 10))
def test_pc_prior_factorizes(r1, r2, s1, s2):
    d1 = pc_log_prior_range_sigma(MaternHyper(r1, s1)) - pc_log_prior_range_sigma(MaternHyper(r1, s2))
    d2 = pc_log_prior_range_sigma(MaternHyper(r2, s1)) - pc_log_prior_range_sigma(MaternHyper(r2, s2))
    assert np.isclose(d1, d2, rtol=1e-9, atol=1e-9)


def test_mesh_export(tmp_path):
    m = build_mesh(Window(0, 0, 2000, 2000), 1000.0, 0.0)
    write_mesh_csv(m, tmp_path)
    assert (tmp_path / "mesh_nodes.csv").read_text().count("\n") == m.n_nodes + 1
    assert (tmp_path / "mesh_triangles.csv").read_text().count("\n") == len(m.triangles) + 1
