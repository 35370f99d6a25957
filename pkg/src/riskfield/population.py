"""Observation window, population raster, areal partition and evaluation grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DisconnectedGraphError, DomainError, ParseError

_TILE_TOL = 1e-9


@dataclass(frozen=True)
class Window:
    """Axis-aligned rectangle in planar metres."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ConfigurationError(f"degenerate window {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.width, self.height))

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (
            (p[:, 0] >= self.xmin)
            & (p[:, 0] <= self.xmax)
            & (p[:, 1] >= self.ymin)
            & (p[:, 1] <= self.ymax)
        )

    def expand(self, margin: float) -> "Window":
        return Window(
            self.xmin - margin, self.ymin - margin, self.xmax + margin, self.ymax + margin
        )


@dataclass(frozen=True)
class Raster:
    """Regular square-cell tiling of a window. Row index runs along y."""

    window: Window
    cell_size: float

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigurationError("cell_size must be positive")
        for extent, name in ((self.window.width, "width"), (self.window.height, "height")):
            n = extent / self.cell_size
            if abs(n - round(n)) > _TILE_TOL * max(1.0, n) or round(n) < 1:
                raise ConfigurationError(
                    f"cell_size {self.cell_size} does not tile window {name} {extent}"
                )

    @property
    def nx(self) -> int:
        return int(round(self.window.width / self.cell_size))

    @property
    def ny(self) -> int:
        return int(round(self.window.height / self.cell_size))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    def centroids(self) -> np.ndarray:
        """Cell centres as an (ny*nx, 2) array in row-major order."""
        xs = self.window.xmin + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.window.ymin + (np.arange(self.ny) + 0.5) * self.cell_size
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Row/column of the cell containing each point; upper edges are closed."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.window.contains(p)
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise DomainError(f"point {p[bad].tolist()} outside window")
        col = np.floor((p[:, 0] - self.window.xmin) / self.cell_size).astype(np.int64)
        row = np.floor((p[:, 1] - self.window.ymin) / self.cell_size).astype(np.int64)
        return np.clip(row, 0, self.ny - 1), np.clip(col, 0, self.nx - 1)

    def flat_index(self, points) -> np.ndarray:
        row, col = self.locate(points)
        return row * self.nx + col


@dataclass(frozen=True)
class PopulationGrid:
    """Persons-at-risk per raster cell."""

    raster: Raster
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != self.raster.shape:
            raise ConfigurationError(
                f"counts shape {counts.shape} does not match raster {self.raster.shape}"
            )
        if (counts < 0).any():
            raise ConfigurationError("population counts must be non-negative")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def window(self) -> Window:
        return self.raster.window

    @property
    def cell_size(self) -> float:
        return self.raster.cell_size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def populated(self) -> np.ndarray:
        """Flat indices of cells with at least one person."""
        return np.flatnonzero(self.counts.ravel() > 0)


def build_synthetic_population(
    window: Window,
    cell_size: float,
    total: int,
    centres: Sequence[tuple[Sequence[float], float, float]],
    seed: int,
    floor: float = 0.1,
) -> PopulationGrid:
    """Multinomial allocation of ``total`` persons over a raster.

    Cell probabilities are a mixture of isotropic Gaussian bumps, one per
    ``(point, weight, spread)`` centre, plus a uniform floor carrying
    ``floor`` of the mass.
    """
    if total <= 0:
        raise ConfigurationError("total population must be positive")
    if len(centres) == 0:
        raise ConfigurationError("at least one population centre is required")
    raster = Raster(window, cell_size)
    xy = raster.centroids()
    weights = np.array([float(w) for _, w, _ in centres])
    if (weights < 0).any() or weights.sum() <= 0:
        raise ConfigurationError("centre weights must be non-negative with positive sum")
    weights = weights / weights.sum()
    bump = np.zeros(len(xy))
    for (point, _, spread), w in zip(centres, weights):
        if spread <= 0:
            raise ConfigurationError("centre spread must be positive")
        d2 = ((xy - np.asarray(point, dtype=float)) ** 2).sum(axis=1)
        dens = np.exp(-0.5 * d2 / spread**2)
        if dens.sum() > 0:
            bump += w * dens / dens.sum()
    if bump.sum() > 0:
        bump /= bump.sum()
    prob = (1.0 - floor) * bump + floor / len(xy)
    prob /= prob.sum()
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(int(total), prob).reshape(raster.shape)
    return PopulationGrid(raster, counts)


def default_centres(window: Window) -> list[tuple[tuple[float, float], float, float]]:
    """Urban, semi-urban and rural centres placed relative to the window."""
    w, h = window.width, window.height
    x0, y0 = window.xmin, window.ymin
    return [
        ((x0 + 0.25 * w, y0 + 0.5 * h), 0.65, 0.08 * w),
        ((x0 + 0.75 * w, y0 + 0.75 * h), 0.25, 0.06 * w),
        ((x0 + 0.72 * w, y0 + 0.22 * h), 0.10, 0.10 * w),
    ]


def load_population_csv(path, window: Window, cell_size: float) -> PopulationGrid:
    """Bin ``x,y,count`` rows onto a raster over ``window``."""
    raster = Raster(window, cell_size)
    counts = np.zeros(raster.shape, dtype=np.int64)
    n_rows = 0
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", row=lineno)
            try:
                x, y, c = float(row[0]), float(row[1]), float(row[2])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ParseError(f"non-numeric field in {row}", row=lineno) from None
            if c < 0 or c != int(c):
                raise ParseError(f"count must be a non-negative integer, got {row[2]}", row=lineno)
            if not window.contains([x, y])[0]:
                raise DomainError(f"row {lineno}: point ({x}, {y}) outside window")
            r, k = raster.locate([x, y])
            counts[r[0], k[0]] += int(c)
            n_rows += 1
    if n_rows == 0:
        raise ParseError(f"no population rows in {path}")
    return PopulationGrid(raster, counts)


def write_population_csv(pop: PopulationGrid, path) -> None:
    xy = pop.raster.centroids()
    flat = pop.counts.ravel()
    idx = np.flatnonzero(flat)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "count"])
        for i in idx:
            w.writerow([repr(float(xy[i, 0])), repr(float(xy[i, 1])), int(flat[i])])


@dataclass(frozen=True)
class ArealPartition:
    """Assignment of every raster cell to a unit labelled 1..N."""

    raster: Raster
    unit_ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.unit_ids, dtype=np.int64)
        if ids.shape != self.raster.shape:
            raise ConfigurationError("unit_ids shape does not match raster")
        labels = np.unique(ids)
        if labels[0] < 1 or not np.array_equal(labels, np.arange(1, len(labels) + 1)):
            raise ConfigurationError("unit ids must be exactly 1..N")
        ids.setflags(write=False)
        object.__setattr__(self, "unit_ids", ids)

    @property
    def unit_count(self) -> int:
        return int(self.unit_ids.max())

    def unit_of(self, points) -> np.ndarray:
        """Unit id (1-based) of the cell containing each point."""
        row, col = self.raster.locate(points)
        return self.unit_ids[row, col]

    def unit_populations(self, pop: PopulationGrid) -> np.ndarray:
        return np.bincount(
            self.unit_ids.ravel() - 1, weights=pop.counts.ravel(), minlength=self.unit_count
        ).astype(np.int64)


def _weighted_kmeans(points, weights, k, rng, max_iter=100):
    n = len(points)
    first = rng.choice(n, p=weights / weights.sum())
    centres = [points[first]]
    d2 = ((points - points[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        p = weights * d2
        if p.sum() <= 0:
            break
        nxt = rng.choice(n, p=p / p.sum())
        centres.append(points[nxt])
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    centres = np.array(centres)
    for _ in range(max_iter):
        _, lab = cKDTree(centres).query(points)
        wsum = np.bincount(lab, weights=weights, minlength=len(centres))
        new = centres.copy()
        ok = wsum > 0
        for d in range(2):
            new[ok, d] = np.bincount(lab, weights=weights * points[:, d], minlength=len(centres))[ok] / wsum[ok]
        if np.allclose(new, centres, rtol=0, atol=1e-9):
            break
        centres = new
    return centres


def _components(mask):
    lab, n = ndimage.label(mask)
    return lab, n


def _repair_contiguity(ids: np.ndarray, pop_counts: np.ndarray) -> np.ndarray:
    ids = ids.copy()
    while True:
        changed = False
        for u in np.unique(ids):
            lab, n = _components(ids == u)
            if n <= 1:
                continue
            sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
            popn = np.bincount(lab.ravel(), weights=pop_counts.ravel(), minlength=n + 1)[1:]
            keep = int(np.lexsort((-sizes, -popn))[0]) + 1
            for c in range(1, n + 1):
                if c == keep:
                    continue
                comp = lab == c
                ring = ndimage.binary_dilation(comp) & ~comp
                # boundary length = number of shared cell edges with each other unit
                edges = {}
                rows, cols = np.nonzero(comp)
                for r, k in zip(rows, cols):
                    for dr, dk in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        rr, kk = r + dr, k + dk
                        if 0 <= rr < ids.shape[0] and 0 <= kk < ids.shape[1] and not comp[rr, kk]:
                            v = int(ids[rr, kk])
                            edges[v] = edges.get(v, 0) + 1
                edges.pop(int(u), None)
                if not edges or not ring.any():
                    continue
                best = max(sorted(edges), key=lambda v: edges[v])
                ids[comp] = best
                changed = True
        if not changed:
            return ids


def build_areal_partition(pop: PopulationGrid, target_units: int = 170, seed: int = 0) -> ArealPartition:
    """Synthetic municipalities from population-weighted k-means.

    Every raster cell (populated or not) is assigned to its nearest seed,
    units without population are dropped, and enclaves are merged into the
    neighbouring unit sharing the longest boundary.
    """
    populated = pop.populated()
    if not (2 <= target_units <= len(populated)):
        raise ConfigurationError(
            f"target_units={target_units} outside [2, {len(populated)}] (populated cells)"
        )
    xy = pop.raster.centroids()
    pts = xy[populated]
    w = pop.counts.ravel()[populated].astype(float)
    if target_units == len(populated):
        seeds = pts.copy()
    else:
        seeds = _weighted_kmeans(pts, w, target_units, np.random.default_rng(seed))
    flat_pop = pop.counts.ravel()
    while True:
        _, lab = cKDTree(seeds).query(xy)
        upop = np.bincount(lab, weights=flat_pop, minlength=len(seeds))
        if (upop > 0).all():
            break
        seeds = seeds[upop > 0]
    ids = _repair_contiguity(lab.reshape(pop.raster.shape), pop.counts)
    _, ids = np.unique(ids, return_inverse=True)
    return ArealPartition(pop.raster, ids.reshape(pop.raster.shape) + 1)


def write_partition_csv(part: ArealPartition, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_row", "cell_col", "unit_id"])
        for (r, c), u in np.ndenumerate(part.unit_ids):
            w.writerow([r, c, int(u)])


@dataclass(frozen=True)
class AdjacencyGraph:
    """First-order (rook) neighbourhood structure over N units."""

    W: sparse.csr_matrix
    n: int = field(init=False)

    def __post_init__(self):
        W = sparse.csr_matrix(self.W, dtype=float)
        if W.shape[0] != W.shape[1]:
            raise ConfigurationError("adjacency matrix must be square")
        if (abs(W - W.T) > 0).nnz:
            raise ConfigurationError("adjacency matrix must be symmetric")
        if W.diagonal().any():
            raise ConfigurationError("adjacency matrix must have zero diagonal")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "n", W.shape[0])

    @property
    def neighbours(self) -> list[np.ndarray]:
        return [self.W.indices[self.W.indptr[i]:self.W.indptr[i + 1]] for i in range(self.n)]

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.W.sum(axis=1)).ravel()

    @classmethod
    def from_edges(cls, n: int, edges) -> "AdjacencyGraph":
        e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        W = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
        W = ((W + W.T) > 0).astype(float)
        return cls(sparse.csr_matrix(W))


def check_connected(W) -> None:
    n, labels = csgraph.connected_components(W, directed=False)
    if n > 1:
        raise DisconnectedGraphError([np.flatnonzero(labels == k) for k in range(n)])


def adjacency_from_partition(part: ArealPartition) -> AdjacencyGraph:
    """Units are neighbours iff they share at least one raster cell edge."""
    ids = part.unit_ids - 1
    pairs = [
        np.column_stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()]),
        np.column_stack([ids[:-1, :].ravel(), ids[1:, :].ravel()]),
    ]
    e = np.concatenate(pairs)
    e = e[e[:, 0] != e[:, 1]]
    g = AdjacencyGraph.from_edges(part.unit_count, e)
    check_connected(g.W)
    return g


@dataclass(frozen=True)
class EvalGrid:
    """Pixel partition used by all metrics, with per-cell population."""

    raster: Raster
    population: np.ndarray

    @property
    def window(self) -> Window:
        return self.raster.window

    @property
    def cell_size(self) -> float:
        return self.raster.cell_size

    @property
    def n_cells(self) -> int:
        return self.raster.nx * self.raster.ny

    def centroids(self) -> np.ndarray:
        return self.raster.centroids()

    def areas(self) -> np.ndarray:
        return np.full(self.n_cells, self.raster.cell_area)

    def b_weights(self, mode: str = "unit") -> np.ndarray:
        """Integrand weights: 1 everywhere or population density per cell."""
        if mode == "unit":
            return np.ones(self.n_cells)
        if mode in ("population", "population-density"):
            return self.population / self.areas()
        raise ConfigurationError(f"unknown b-weight mode {mode!r}")


def cell_mapping(src: Raster, dst: Raster) -> np.ndarray:
    """Flat destination-cell index for every source cell (by source centroid)."""
    return dst.flat_index(src.centroids())


def build_eval_grid(pop: PopulationGrid, cell_size: float = 500.0) -> EvalGrid:
    raster = Raster(pop.window, cell_size)
    idx = cell_mapping(pop.raster, raster)
    population = np.bincount(idx, weights=pop.counts.ravel(), minlength=raster.nx * raster.ny)
    return EvalGrid(raster, population.astype(np.int64))
