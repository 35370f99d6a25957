import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskfield.errors import ConfigurationError
from riskfield.population import PopulationGrid, Raster, Window, build_synthetic_population, default_centres
from riskfield.risk_surface import (
    CircleSpec,
    FlatSurface,
    SmoothSurface,
    StepSurface,
    expected_cases,
    solve_gamma,
    solve_surface_parameters,
    surface_from_dict,
    surface_to_dict,
)

WIN = Window(0.0, 0.0, 40000.0, 30000.0)
# 2-D quadrature of the planar Gaussian over the disc gives 0.8 at these values
GAMMA_1KM = 557.3755172949
GAMMA_5KM = 2786.8775864747


@pytest.fixture(scope="module")
def pop():
    return build_synthetic_population(WIN, 250.0, 200000, default_centres(WIN), seed=1)


def circles(r):
    return CircleSpec(tuple(p for p, _, _ in default_centres(WIN)), r)


def test_step_values():
    s = StepSurface(0.001, 4.0, CircleSpec(((0.0, 0.0),), 100.0))
    v = s.risk_at([[0, 0], [100, 0], [100.0001, 0], [500, 500]])
    assert np.allclose(v, [0.005, 0.005, 0.001, 0.001], rtol=0, atol=1e-15)


def test_smooth_values_and_max_semantics():
    s = SmoothSurface(0.001, 0.002, 300.0, CircleSpec(((0.0, 0.0), (1000.0, 0.0)), 500.0))
    assert np.isclose(s.risk_at([[0, 0]])[0], 0.003)
    assert np.isclose(s.risk_at([[1e7, 1e7]])[0], 0.001)
    mid = s.risk_at([[500.0, 0.0]])[0]
    single = 0.001 + 0.002 * np.exp(-500.0**2 / (2 * 300.0**2))
    assert np.isclose(mid, single, rtol=1e-14)


def test_solve_gamma_values():
    assert np.isclose(solve_gamma(1000.0), GAMMA_1KM, rtol=1e-10)
    assert np.isclose(solve_gamma(5000.0), GAMMA_5KM, rtol=1e-10)
    g = solve_gamma(1000.0)
    assert abs(1 - np.exp(-1000.0**2 / (2 * g * g)) - 0.8) < 1e-10


@given(r=st.floats(1.0, 1e5), k=st.floats(0.1, 50.0))
def test_solve_gamma_scales(r, k):
    assert np.isclose(solve_gamma(k * r), k * solve_gamma(r), rtol=1e-9)


def test_flat_paper_rate():
    counts = np.zeros((1, 2), dtype=int)
    counts[0, 0] = 206532
    pop = PopulationGrid(Raster(Window(0, 0, 2, 1), 1.0), counts)
    s = solve_surface_parameters(pop, None, 1.0, 1.0, 334, "flat")
    assert np.isclose(s.lambda0, 334 / 206532)
    assert abs(s.lambda0 - 0.0016172) < 1e-7


def test_step_with_empty_circles_reduces_to_flat(pop):
    far = CircleSpec(((1e7, 1e7),), 1000.0)
    s = solve_surface_parameters(pop, far, 5.0, 1.0, 334, "step")
    assert np.isclose(s.lambda0, 334 / pop.total, rtol=1e-14)


@pytest.mark.parametrize("shape", ["step", "smooth"])
@pytest.mark.parametrize("r", [1000.0, 5000.0, 10000.0])
@pytest.mark.parametrize("c", [2.0, 5.0])
def test_closure(pop, shape, r, c):
    s = solve_surface_parameters(pop, circles(r), c, 5.0, 334, shape)
    # direct summation over populated cells
    xy = pop.raster.centroids()
    n = pop.counts.ravel()
    total = float((n * s.risk_at(xy)).sum())
    assert abs(total - 1670) <= 1e-6 * 1670
    assert abs(expected_cases(s, pop) - 1670) <= 1e-6 * 1670


@pytest.mark.parametrize("r", [1000.0, 5000.0, 10000.0])
@pytest.mark.parametrize("c", [2.0, 5.0])
def test_excess_matches_between_shapes(pop, r, c):
    st_ = solve_surface_parameters(pop, circles(r), c, 5.0, 334, "step")
    sm = solve_surface_parameters(pop, circles(r), c, 5.0, 334, "smooth")
    ex_step = expected_cases(st_, pop) - st_.lambda0 * pop.total
    ex_smooth = expected_cases(sm, pop) - sm.lambda0 * pop.total
    assert abs(ex_step - ex_smooth) <= 1e-6 * ex_step
    xy = pop.raster.centroids()
    assert (sm.risk_at(xy) >= sm.lambda0).all()
    assert len(np.unique(st_.risk_at(xy))) == 2


def test_expected_cases_trivial():
    pop0 = PopulationGrid(Raster(Window(0, 0, 2, 1), 1.0), np.zeros((1, 2), int))
    assert expected_cases(FlatSurface(0.01), pop0) == 0.0
    pop1 = PopulationGrid(Raster(Window(0, 0, 2, 1), 1.0), np.array([[10, 30]]))
    assert np.isclose(expected_cases(FlatSurface(0.01), pop1), 0.4)


def test_risk_of_one_rejected(pop):
    with pytest.raises(ConfigurationError):
        solve_surface_parameters(pop, circles(1000.0), 5.0, 1e5, 334, "step")
    with pytest.raises(ConfigurationError):
        StepSurface(0.3, 3.0, circles(1000.0))
    with pytest.raises(ConfigurationError):
        solve_surface_parameters(pop, circles(1000.0), 1.0, 1.0, 334, "step")


def test_dict_round_trip(pop):
    for shape in ("flat", "step", "smooth"):
        s = solve_surface_parameters(pop, circles(5000.0), 2.0, 1.0, 334, shape)
        assert surface_from_dict(surface_to_dict(s)) == s
