"""Ground-truth risk surfaces: flat, step (discs) and smooth (Gaussian bumps)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import optimize

from .errors import ConfigurationError
from .population import PopulationGrid

EXCESS_MASS = 0.8


@dataclass(frozen=True)
class CircleSpec:
    centres: tuple[tuple[float, float], ...]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("circle radius must be positive")
        c = tuple((float(x), float(y)) for x, y in self.centres)
        if not c:
            raise ConfigurationError("at least one circle centre is required")
        object.__setattr__(self, "centres", c)

    def distances(self, points) -> np.ndarray:
        """(n_points, n_centres) Euclidean distances."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        c = np.asarray(self.centres)
        return np.sqrt(((p[:, None, :] - c[None, :, :]) ** 2).sum(axis=2))

    def inside(self, points) -> np.ndarray:
        return (self.distances(points) <= self.radius).any(axis=1)


@dataclass(frozen=True)
class FlatSurface:
    lambda0: float

    def __post_init__(self):
        if not 0 < self.lambda0 < 1:
            raise ConfigurationError("lambda0 must lie in (0, 1)")

    def risk_at(self, points) -> np.ndarray:
        return np.full(len(np.atleast_2d(points)), self.lambda0)

    @property
    def shape(self) -> str:
        return "flat"


@dataclass(frozen=True)
class StepSurface:
    lambda0: float
    alpha: float
    circles: CircleSpec

    def __post_init__(self):
        if not 0 < self.lambda0 < 1:
            raise ConfigurationError("lambda0 must lie in (0, 1)")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if (1 + self.alpha) * self.lambda0 >= 1:
            raise ConfigurationError("c * lambda0 must stay below 1")

    @property
    def c(self) -> float:
        return 1.0 + self.alpha

    def risk_at(self, points) -> np.ndarray:
        return step_risk_at(self, points)

    @property
    def shape(self) -> str:
        return "step"


@dataclass(frozen=True)
class SmoothSurface:
    lambda0: float
    beta: float
    gamma: float
    circles: CircleSpec

    def __post_init__(self):
        if not (self.lambda0 > 0 and self.beta >= 0 and self.gamma > 0):
            raise ConfigurationError("smooth surface needs lambda0 > 0, beta >= 0, gamma > 0")
        if self.lambda0 + self.beta >= 1:
            raise ConfigurationError("lambda0 + beta must stay below 1")

    def risk_at(self, points) -> np.ndarray:
        return smooth_risk_at(self, points)

    @property
    def shape(self) -> str:
        return "smooth"


RiskSurface = Union[FlatSurface, StepSurface, SmoothSurface]


def step_risk_at(surface: StepSurface, points) -> np.ndarray:
    inside = surface.circles.inside(points)
    return surface.lambda0 * (1.0 + surface.alpha * inside)


def _bump(circles: CircleSpec, gamma: float, points) -> np.ndarray:
    d = circles.distances(points)
    return np.exp(-(d.min(axis=1) ** 2) / (2.0 * gamma**2))


def smooth_risk_at(surface: SmoothSurface, points) -> np.ndarray:
    return surface.lambda0 + surface.beta * _bump(surface.circles, surface.gamma, points)


def solve_gamma(r: float) -> float:
    """Length-scale whose planar Gaussian puts 80% of its mass inside radius r."""
    if not r > 0:
        raise ConfigurationError("radius must be positive")
    # mass inside r as a function of s = log(gamma / r)
    f = lambda s: 1.0 - np.exp(-0.5 * np.exp(-2.0 * s)) - EXCESS_MASS
    s = optimize.bisect(f, -10.0, 10.0, xtol=1e-14, maxiter=200)
    return float(r * np.exp(s))


def solve_surface_parameters(
    pop: PopulationGrid,
    circles: CircleSpec | None,
    c: float,
    k: float,
    n_ref: int = 334,
    shape: str = "step",
) -> RiskSurface:
    """Calibrate a surface so that ``k * n_ref`` cases are expected.

    Step: baseline solves ``lambda0 * (P_out + c * P_in) = k n``.
    Smooth: ``gamma`` from the 80% mass rule, ``beta`` matches the step
    surface's expected excess, and the baseline closes the total.
    """
    if k <= 0 or n_ref <= 0:
        raise ConfigurationError("k and n_ref must be positive")
    target = float(k) * float(n_ref)
    total = pop.total
    if total <= 0:
        raise ConfigurationError("population is empty")
    if shape == "flat":
        return _checked(FlatSurface(target / total), pop)
    if shape not in ("step", "smooth"):
        raise ConfigurationError(f"unknown surface shape {shape!r}")
    if circles is None:
        raise ConfigurationError(f"{shape} surface requires circles")
    if not c > 1:
        raise ConfigurationError("risk ratio c must exceed 1")
    xy = pop.raster.centroids()
    counts = pop.counts.ravel().astype(float)
    p_in = counts[circles.inside(xy)].sum()
    lam0 = target / (total + (c - 1.0) * p_in)
    if lam0 >= 1 or (p_in > 0 and c * lam0 >= 1):
        raise ConfigurationError("solved risk reaches 1; lower k or c")
    if shape == "step":
        return _checked(StepSurface(lam0, c - 1.0, circles), pop)
    gamma = solve_gamma(circles.radius)
    excess = (c - 1.0) * lam0 * p_in
    mass = (counts * _bump(circles, gamma, xy)).sum()
    beta = excess / mass if mass > 0 else 0.0
    lam0_smooth = (target - beta * mass) / total
    return _checked(SmoothSurface(lam0_smooth, beta, gamma, circles), pop)


def _checked(surface: RiskSurface, pop: PopulationGrid) -> RiskSurface:
    populated = pop.populated()
    if len(populated):
        top = surface.risk_at(pop.raster.centroids()[populated]).max()
        if top >= 1:
            raise ConfigurationError(f"risk {top:.3g} >= 1 at a populated cell")
    return surface


def expected_cases(surface: RiskSurface, pop: PopulationGrid) -> float:
    counts = pop.counts.ravel()
    idx = np.flatnonzero(counts)
    if len(idx) == 0:
        return 0.0
    risk = surface.risk_at(pop.raster.centroids()[idx])
    return float((counts[idx] * risk).sum())


def surface_to_dict(surface: RiskSurface) -> dict:
    d = {"shape": surface.shape, "lambda0": surface.lambda0}
    if isinstance(surface, StepSurface):
        d["alpha"] = surface.alpha
    if isinstance(surface, SmoothSurface):
        d["beta"] = surface.beta
        d["gamma"] = surface.gamma
    if not isinstance(surface, FlatSurface):
        d["radius"] = surface.circles.radius
        d["centres"] = [list(p) for p in surface.circles.centres]
    return d


def surface_from_dict(d: dict) -> RiskSurface:
    shape = d["shape"]
    if shape == "flat":
        return FlatSurface(float(d["lambda0"]))
    circles = CircleSpec(tuple(tuple(p) for p in d["centres"]), float(d["radius"]))
    if shape == "step":
        return StepSurface(float(d["lambda0"]), float(d["alpha"]), circles)
    if shape == "smooth":
        return SmoothSurface(float(d["lambda0"]), float(d["beta"]), float(d["gamma"]), circles)
    raise ConfigurationError(f"unknown surface shape {shape!r}")
