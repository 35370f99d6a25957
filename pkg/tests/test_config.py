from pathlib import Path

import pytest

from riskfield.config import Config, Scenario, config_from_text, enumerate_sweep, load_config
from riskfield.errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_desk_file_equals_defaults():
    assert load_config(CONFIGS / "desk.ini") == Config()


def test_default_sweep_has_39_scenarios():
    scs = Config().scenarios(sweep=True)
    assert len(scs) == 39
    assert len({s.scenario_id for s in scs}) == 39
    assert sum(s.shape == "flat" for s in scs) == 3
    assert {s.k for s in scs} == {1.0, 5.0, 10.0}
    assert len(enumerate_sweep(("step",), (1000.0,), (2.0,), (1.0,), flat=False)) == 1


def test_scenario_ids_and_seeds():
    assert Scenario("flat", 0.0, 1.0, 10.0).scenario_id == "flat_k10"
    assert Scenario("smooth", 1000.0, 2.0, 5.0).scenario_id == "smooth_r1000_c2_k5"
    assert Scenario("step", 2500.5, 2.5, 1.0).scenario_id == "step_r2500.5_c2.5_k1"
    cfg = Config()
    a, b = Scenario("flat", 0.0, 1.0, 1.0), Scenario("flat", 0.0, 1.0, 5.0)
    assert cfg.scenario_seed(a) != cfg.scenario_seed(b)
    assert cfg.scenario_seed(a) == Config().scenario_seed(a)
    assert cfg.with_seed(7).scenario_seed(a) != cfg.scenario_seed(a)
    assert cfg.with_seed(None) is cfg
    assert cfg.reference_rate(b, 200000) == 5 * 334 / 200000


def test_parse_values():
    cfg = config_from_text("""
[scenario]
shape = Smooth
radius = 1000
c = 2
k = 10
centres = 100 200; 300,400
[models]
models = lgcp
[mesh]
extension = 0
lattice = square
[sweep]
flat = no
radii = 1000; 2000
""")
    assert cfg.scenario == Scenario("smooth", 1000.0, 2.0, 10.0)
    assert cfg.centres == ((100.0, 200.0), (300.0, 400.0))
    assert cfg.models == ("lgcp",)
    assert cfg.mesh_extension == 0.0 and cfg.mesh_lattice == "square"
    assert not cfg.sweep_flat and cfg.sweep_radii == (1000.0, 2000.0)


def test_flat_allows_c_one():
    assert config_from_text("[scenario]\nshape = flat\nc = 1\n").scenario.c == 1.0


@pytest.mark.parametrize("text,path", [
    ("[scenario]\nshape = wavy\n", "scenario.shape"),
    ("[scenario]\nradius = -5\n", "scenario.radius"),
    ("[scenario]\nc = 1\n", "scenario.c"),
    ("[scenario]\nk = zero\n", "scenario.k"),
    ("[scenario]\ncentres = 1 2 3\n", "scenario.centres"),
    ("[models]\nmodels = bym, glm\n", "models.models"),
    ("[models]\nmodels = ,\n", "models.models"),
    ("[models]\nn_samples = 50\n", "models.n_samples"),
    ("[models]\nphi_prior = beta\n", "models.phi_prior"),
    ("[metrics]\nq_grid = 0, 0.5, 0.4\n", "metrics.q_grid"),
    ("[metrics]\nq_grid = 0, 1\n", "metrics.q_grid"),
    ("[population]\nwindow = 0, 0, 10\n", "population.window"),
    ("[population]\nwindow = 0, 0, -10, 10\n", "population.window"),
    ("[population]\ncell_size = 300\n", "population.cell_size"),
    ("[grid]\ncell_size = 7000\n", "grid.cell_size"),
    ("[partition]\ntarget_units = 1\n", "partition.target_units"),
    ("[simulation]\nreplicates = 0\n", "simulation.replicates"),
    ("[simulation]\nseed = -1\n", "simulation.seed"),
    ("[mesh]\nlattice = hex\n", "mesh.lattice"),
    ("[mesh]\nextension = -1\n", "mesh.extension"),
    ("[map]\nthresholds = 1.5\n", "map.thresholds"),
    ("[sweep]\nflat = maybe\n", "sweep.flat"),
    ("[sweep]\nshapes = flat\n", "sweep.shapes"),
    ("[simulation]\nreplicate = 3\n", "simulation.replicate"),
    ("[plots]\nx = 1\n", "plots"),
])
def test_errors_name_the_field(text, path):
    with pytest.raises(ConfigurationError, match=path.replace(".", r"\.")):
        config_from_text(text)


def test_syntax_and_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="syntax"):
        config_from_text("no section header\n")
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "nope.ini")
