"""Scenario configuration: INI-style sections, validated with explicit field paths."""

from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .population import Window

MODELS = ("bym", "lgcp")
SHAPES = ("flat", "step", "smooth")
KNOWN_KEYS = {
    "population": {"window", "cell_size", "total", "seed", "csv"},
    "partition": {"target_units", "seed"},
    "scenario": {"shape", "radius", "c", "k", "n_ref", "centres"},
    "simulation": {"replicates", "seed"},
    "models": {"models", "phi_prior", "n_samples"},
    "grid": {"cell_size"},
    "mesh": {"spacing", "extension", "lattice"},
    "metrics": {"q_grid"},
    "map": {"thresholds", "replicates"},
    "sweep": {"shapes", "radii", "ratios", "multipliers", "flat"},
}


@dataclass(frozen=True)
class Scenario:
    shape: str
    radius: float
    c: float
    k: float

    @property
    def scenario_id(self) -> str:
        if self.shape == "flat":
            return f"flat_k{_num(self.k)}"
        return f"{self.shape}_r{_num(self.radius)}_c{_num(self.c)}_k{_num(self.k)}"


def _num(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass(frozen=True)
class Config:
    # population
    window: Window = Window(0.0, 0.0, 40000.0, 30000.0)
    pop_cell_size: float = 250.0
    pop_total: int = 200000
    pop_seed: int = 1
    pop_csv: str | None = None
    # partition
    target_units: int = 170
    partition_seed: int = 0
    # scenario
    scenario: Scenario = Scenario("step", 5000.0, 5.0, 5.0)
    n_ref: int = 334
    centres: tuple | None = None
    # simulation
    replicates: int = 30
    seed: int = 20240101
    # models
    models: tuple = MODELS
    phi_prior: str = "pc"
    n_samples: int = 500
    # grid and mesh
    eval_cell_size: float = 1000.0
    mesh_spacing: float = 1500.0
    mesh_extension: float | None = None
    mesh_lattice: str = "equilateral"
    # metrics and maps
    q_grid: tuple = tuple(round(0.05 * i, 2) for i in range(20))
    map_thresholds: tuple = (0.5, 0.8)
    map_replicates: tuple = (0,)
    # sweep
    sweep_shapes: tuple = ("step", "smooth")
    sweep_radii: tuple = (1000.0, 5000.0, 10000.0)
    sweep_ratios: tuple = (2.0, 5.0)
    sweep_multipliers: tuple = (1.0, 5.0, 10.0)
    sweep_flat: bool = True
    source: str = field(default="", compare=False)

    def scenarios(self, sweep: bool = False) -> list[Scenario]:
        if not sweep:
            return [self.scenario]
        return enumerate_sweep(self.sweep_shapes, self.sweep_radii, self.sweep_ratios,
                               self.sweep_multipliers, self.sweep_flat)

    def scenario_seed(self, sc: Scenario) -> int:
        """Stable per-scenario seed derived from the base seed and the scenario id."""
        return (int(self.seed) * 1_000_003 + zlib.crc32(sc.scenario_id.encode())) % (2**63)

    def reference_rate(self, sc: Scenario, population_total: int) -> float:
        return sc.k * self.n_ref / population_total

    def with_seed(self, seed: int | None) -> "Config":
        return self if seed is None else replace(self, seed=int(seed))


def enumerate_sweep(shapes, radii, ratios, multipliers, flat=True) -> list[Scenario]:
    out = []
    for k in multipliers:
        if flat:
            out.append(Scenario("flat", 0.0, 1.0, float(k)))
        for shape in shapes:
            for r in radii:
                for c in ratios:
                    out.append(Scenario(shape, float(r), float(c), float(k)))
    return out


class _Reader:
    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp

    def raw(self, sec, key):
        if self.cp.has_option(sec, key):
            return self.cp.get(sec, key).strip()
        return None

    def get(self, sec, key, conv, default, check=None, msg=""):
        v = self.raw(sec, key)
        if v is None or v == "":
            return default
        try:
            out = conv(v)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{sec}.{key}: cannot parse {v!r}") from None
        if check is not None and not check(out):
            raise ConfigurationError(f"{sec}.{key}: {msg} (got {v!r})")
        return out


def _floats(v):
    return tuple(float(x) for x in v.replace(";", ",").split(",") if x.strip())


def _ints(v):
    return tuple(int(x) for x in v.split(",") if x.strip())


def _words(v):
    return tuple(x.strip().lower() for x in v.split(",") if x.strip())


def _bool(v):
    s = v.lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _centres(v):
    pts = []
    for part in v.split(";"):
        if part.strip():
            xy = tuple(float(x) for x in part.replace(",", " ").split())
            if len(xy) != 2:
                raise ValueError(part)
            pts.append(xy)
    return tuple(pts)


def _incr01(q):
    a = np.asarray(q)
    return len(a) > 0 and bool((np.diff(a) > 0).all()) and a[0] >= 0 and a[-1] < 1


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax error: {exc}") from None
    return parse_config(cp, str(path))


def parse_config(cp: configparser.ConfigParser, source: str = "") -> Config:
    for sec in cp.sections():
        if sec not in KNOWN_KEYS:
            raise ConfigurationError(f"{sec}: unknown section")
        for key in cp.options(sec):
            if key not in KNOWN_KEYS[sec] and key not in cp.defaults():
                raise ConfigurationError(f"{sec}.{key}: unknown key")
    r = _Reader(cp)
    d = Config()
    pos = lambda x: x > 0

    win = r.get("population", "window", _floats, None, lambda w: len(w) == 4, "expected xmin,ymin,xmax,ymax")
    try:
        window = d.window if win is None else Window(*win)
    except (ValueError, ConfigurationError) as exc:
        raise ConfigurationError(f"population.window: {exc}") from None
    shape = r.get("scenario", "shape", str.lower, d.scenario.shape, lambda s: s in SHAPES,
                  f"must be one of {SHAPES}")
    radius = r.get("scenario", "radius", float, d.scenario.radius, pos, "must be positive")
    c = r.get("scenario", "c", float, d.scenario.c if shape != "flat" else 1.0,
              (lambda x: x > 1) if shape != "flat" else (lambda x: x >= 1), "must exceed 1")
    k = r.get("scenario", "k", float, d.scenario.k, pos, "must be positive")
    models = r.get("models", "models", _words, d.models,
                   lambda m: len(m) > 0 and all(x in MODELS for x in m), f"must be a non-empty subset of {MODELS}")
    ext = r.raw("mesh", "extension")
    if ext is None or ext.lower() in ("", "auto"):
        extension = None
    else:
        extension = r.get("mesh", "extension", float, None, lambda x: x >= 0, "must be non-negative")
    sweep_shapes = r.get("sweep", "shapes", _words, d.sweep_shapes,
                         lambda s: all(x in ("step", "smooth") for x in s), "must be step and/or smooth")

    cfg = Config(
        window=window,
        pop_cell_size=r.get("population", "cell_size", float, d.pop_cell_size, pos, "must be positive"),
        pop_total=r.get("population", "total", int, d.pop_total, pos, "must be positive"),
        pop_seed=r.get("population", "seed", int, d.pop_seed),
        pop_csv=r.get("population", "csv", str, None),
        target_units=r.get("partition", "target_units", int, d.target_units, lambda x: x >= 2, "must be at least 2"),
        partition_seed=r.get("partition", "seed", int, d.partition_seed),
        scenario=Scenario(shape, radius, c, k),
        n_ref=r.get("scenario", "n_ref", int, d.n_ref, pos, "must be positive"),
        centres=r.get("scenario", "centres", _centres, None, lambda p: len(p) >= 1, "need at least one centre"),
        replicates=r.get("simulation", "replicates", int, d.replicates, pos, "must be positive"),
        seed=r.get("simulation", "seed", int, d.seed, lambda x: x >= 0, "must be non-negative"),
        models=models,
        phi_prior=r.get("models", "phi_prior", str.lower, d.phi_prior, lambda s: s in ("pc", "uniform"),
                        "must be pc or uniform"),
        n_samples=r.get("models", "n_samples", int, d.n_samples, lambda x: x >= 100, "must be at least 100"),
        eval_cell_size=r.get("grid", "cell_size", float, d.eval_cell_size, pos, "must be positive"),
        mesh_spacing=r.get("mesh", "spacing", float, d.mesh_spacing, pos, "must be positive"),
        mesh_extension=extension,
        mesh_lattice=r.get("mesh", "lattice", str.lower, d.mesh_lattice, lambda s: s in ("equilateral", "square"),
                           "must be equilateral or square"),
        q_grid=r.get("metrics", "q_grid", _floats, d.q_grid, _incr01, "must be strictly increasing within [0, 1)"),
        map_thresholds=r.get("map", "thresholds", _floats, d.map_thresholds,
                             lambda t: all(0 <= x <= 1 for x in t), "must lie in [0, 1]"),
        map_replicates=r.get("map", "replicates", _ints, d.map_replicates, lambda t: all(x >= 0 for x in t),
                             "must be non-negative"),
        sweep_shapes=sweep_shapes,
        sweep_radii=r.get("sweep", "radii", _floats, d.sweep_radii, lambda t: all(x > 0 for x in t), "must be positive"),
        sweep_ratios=r.get("sweep", "ratios", _floats, d.sweep_ratios, lambda t: all(x > 1 for x in t), "must exceed 1"),
        sweep_multipliers=r.get("sweep", "multipliers", _floats, d.sweep_multipliers,
                                lambda t: all(x > 0 for x in t), "must be positive"),
        sweep_flat=r.get("sweep", "flat", _bool, d.sweep_flat),
        source=source,
    )
    _check_tiling(cfg)
    return cfg


def _check_tiling(cfg: Config):
    for key, size in (("population.cell_size", cfg.pop_cell_size), ("grid.cell_size", cfg.eval_cell_size)):
        for extent in (cfg.window.width, cfg.window.height):
            n = extent / size
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ConfigurationError(f"{key}: {size} does not tile the window")


def config_from_text(text: str) -> Config:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax error: {exc}") from None
    return parse_config(cp, "<string>")
