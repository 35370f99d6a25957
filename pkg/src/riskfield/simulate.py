"""Replicate case datasets drawn from a risk surface over a population raster."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError
from .population import ArealPartition, EvalGrid, PopulationGrid, cell_mapping


@dataclass(frozen=True)
class Dataset:
    case_counts: np.ndarray
    scenario_id: str = ""
    replicate_id: int = 0
    seed: int = 0

    @property
    def total_cases(self) -> int:
        return int(self.case_counts.sum())


def replicate_rng(seed: int, replicate: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, replicate); independent of run order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replicate)])))


def simulate_dataset(surface, pop: PopulationGrid, seed: int, replicate: int = 0,
                     scenario_id: str = "") -> Dataset:
    """Binomial case count per populated cell at the centroid risk.

    Equivalent in law to declaring each person a case when a uniform draw
    falls below their risk.
    """
    flat = pop.counts.ravel()
    idx = np.flatnonzero(flat)
    cases = np.zeros(flat.shape, dtype=np.int64)
    if len(idx):
        risk = np.asarray(surface.risk_at(pop.raster.centroids()[idx]), dtype=float)
        if (risk >= 1).any() or (risk < 0).any():
            raise DomainError("risk must lie in [0, 1) at populated cells")
        cases[idx] = replicate_rng(seed, replicate).binomial(flat[idx], risk)
    out = cases.reshape(pop.raster.shape)
    out.setflags(write=False)
    return Dataset(out, scenario_id, replicate, seed)


def aggregate_to_units(ds: Dataset, part: ArealPartition, pop: PopulationGrid):
    """Per-unit case counts Y_i and populations P_i."""
    if ds.case_counts.shape != part.raster.shape or pop.counts.shape != part.raster.shape:
        raise DomainError("dataset, population and partition rasters differ")
    lab = part.unit_ids.ravel() - 1
    n = part.unit_count
    y = np.bincount(lab, weights=ds.case_counts.ravel(), minlength=n).astype(np.int64)
    p = np.bincount(lab, weights=pop.counts.ravel(), minlength=n).astype(np.int64)
    return y, p


def aggregate_to_grid(ds: Dataset, grid: EvalGrid, pop: PopulationGrid):
    """Per-cell case counts and populations on the evaluation grid."""
    if ds.case_counts.shape != pop.raster.shape:
        raise DomainError("dataset and population rasters differ")
    idx = cell_mapping(pop.raster, grid.raster)
    y = np.bincount(idx, weights=ds.case_counts.ravel(), minlength=grid.n_cells).astype(np.int64)
    p = np.bincount(idx, weights=pop.counts.ravel(), minlength=grid.n_cells).astype(np.int64)
    return y, p


def write_dataset_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_row", "cell_col", "cases"])
        for (r, c), v in np.ndenumerate(ds.case_counts):
            if v:
                w.writerow([r, c, int(v)])


def read_dataset_csv(path, shape, scenario_id="", replicate_id=0, seed=0) -> Dataset:
    counts = np.zeros(shape, dtype=np.int64)
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip() == "cell_row":
                continue
            try:
                r, c, v = (int(x) for x in row)
            except ValueError:
                raise ParseError(f"malformed dataset row {row}", row=lineno) from None
            if not (0 <= r < shape[0] and 0 <= c < shape[1]) or v < 0:
                raise ParseError(f"cell ({r}, {c}) outside raster or negative count", row=lineno)
            counts[r, c] += v
    return Dataset(counts, scenario_id, replicate_id, seed)
