"""Batch stages behind the command line: simulate, fit, evaluate, map, sweep.

Run directory layout::

    manifest.json
    setup/      population.csv, partition.csv, mesh_nodes.csv, mesh_triangles.csv
    <scenario>/datasets/rep_0000.csv
    <scenario>/fits/<model>/rep_0000.csv, rep_0000_hyper.csv, rep_0000_samples.npy
    <scenario>/diagnostics.jsonl
    <scenario>/metrics_<model>.csv, coverage_<model>.csv
    <scenario>/maps/<model>_rep_0000_{mean_risk,exceedance}.pgm, ..._mask_<q>.pbm
    summary.csv
"""

from __future__ import annotations

import csv
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bym import icar_precision
from .config import Config, Scenario
from .errors import ConfigurationError, DomainError, FitError, ParseError, SingularMatrixError
from .evaluation import MetricsConfig, MetricsReport, evaluate_replicate, summarize
from .fit import fit_bym, fit_lgcp, prepare_lgcp, read_fit_csv, write_fit_csv, write_hyper_csv
from .population import (
    adjacency_from_partition,
    build_areal_partition,
    build_eval_grid,
    build_synthetic_population,
    default_centres,
    load_population_csv,
    write_partition_csv,
    write_population_csv,
)
from .risk_surface import (
    CircleSpec,
    expected_cases,
    solve_surface_parameters,
    surface_from_dict,
    surface_to_dict,
)
from .simulate import (
    aggregate_to_grid,
    aggregate_to_units,
    read_dataset_csv,
    simulate_dataset,
    write_dataset_csv,
)
from .spde import write_mesh_csv

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def resolve_jobs(jobs: int | None) -> int:
    """``--jobs`` if given, else ``RISKFIELD_JOBS``, else 1."""
    if jobs is None:
        env = os.environ.get("RISKFIELD_JOBS", "").strip()
        if env:
            try:
                jobs = int(env)
            except ValueError:
                raise ConfigurationError(f"RISKFIELD_JOBS: not an integer: {env!r}") from None
        else:
            jobs = 1
    if jobs < 1:
        raise ConfigurationError("jobs must be at least 1")
    return jobs


@dataclass
class Context:
    """Population, partition and model structures shared by every replicate."""

    cfg: Config
    pop: object
    part: object
    grid: object
    centres: tuple
    _structure: object = None
    _lgcp: object = None

    @property
    def structure(self):
        if self._structure is None:
            self._structure = icar_precision(adjacency_from_partition(self.part))
        return self._structure

    @property
    def lgcp(self):
        if self._lgcp is None:
            self._lgcp = prepare_lgcp(self.grid, self.cfg.mesh_spacing, self.cfg.mesh_extension,
                                      self.cfg.mesh_lattice)
        return self._lgcp

    def cell_unit(self) -> np.ndarray:
        """0-based unit of the partition cell containing each evaluation centroid."""
        return self.part.unit_of(self.grid.centroids()) - 1


def build_context(cfg: Config) -> Context:
    if cfg.pop_csv:
        pop = load_population_csv(cfg.pop_csv, cfg.window, cfg.pop_cell_size)
    else:
        pop = build_synthetic_population(cfg.window, cfg.pop_cell_size, cfg.pop_total,
                                         default_centres(cfg.window), cfg.pop_seed)
    part = build_areal_partition(pop, cfg.target_units, cfg.partition_seed)
    grid = build_eval_grid(pop, cfg.eval_cell_size)
    centres = cfg.centres or tuple(c[0] for c in default_centres(cfg.window))
    return Context(cfg, pop, part, grid, tuple(tuple(map(float, c)) for c in centres))


def solve_scenario(ctx: Context, sc: Scenario):
    circles = None if sc.shape == "flat" else CircleSpec(ctx.centres, sc.radius)
    return solve_surface_parameters(ctx.pop, circles, sc.c, sc.k, ctx.cfg.n_ref, sc.shape)


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_record(cfg: Config) -> dict:
    d = asdict(cfg)
    d.pop("source", None)
    return json.loads(json.dumps(d, default=str))


def cmd_simulate(cfg: Config, out_dir, sweep: bool = False, ctx: Context | None = None) -> dict:
    """Write replicate datasets plus a manifest of seeds and solved surfaces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = ctx or build_context(cfg)
    setup = out / "setup"
    setup.mkdir(exist_ok=True)
    write_population_csv(ctx.pop, setup / "population.csv")
    write_partition_csv(ctx.part, setup / "partition.csv")
    if "lgcp" in cfg.models:
        write_mesh_csv(ctx.lgcp.mesh, setup)
    scenarios = {}
    for sc in cfg.scenarios(sweep):
        sid = sc.scenario_id
        surface = solve_scenario(ctx, sc)
        seed = cfg.scenario_seed(sc)
        dsdir = out / sid / "datasets"
        dsdir.mkdir(parents=True, exist_ok=True)
        totals = []
        for j in range(cfg.replicates):
            ds = simulate_dataset(surface, ctx.pop, seed, j, sid)
            write_dataset_csv(ds, dsdir / f"rep_{j:04d}.csv")
            totals.append(ds.total_cases)
        scenarios[sid] = {
            "scenario": asdict(sc),
            "seed": seed,
            "surface": surface_to_dict(surface),
            "expected_cases": expected_cases(surface, ctx.pop),
            "target_cases": sc.k * cfg.n_ref,
            "reference_rate": cfg.reference_rate(sc, ctx.pop.total),
            "replicates": cfg.replicates,
            "total_cases": totals,
        }
    manifest = {
        "config": _config_record(cfg),
        "population_total": ctx.pop.total,
        "unit_count": ctx.part.unit_count,
        "eval_cells": ctx.grid.n_cells,
        "mesh_nodes": ctx.lgcp.n_nodes if "lgcp" in cfg.models else None,
        "scenarios": scenarios,
    }
    _json_dump(manifest, out / MANIFEST)
    return manifest


def load_manifest(out_dir) -> dict:
    p = Path(out_dir) / MANIFEST
    if not p.is_file():
        raise ConfigurationError(f"no {MANIFEST} in {out_dir}; run simulate first")
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def fit_seed(cfg: Config, sid: str, model: str, rep: int) -> int:
    return (int(cfg.seed) + zlib.crc32(f"{sid}/{model}/{rep}".encode())) % (2**32)


_WORKER: dict = {}


def _worker_init(cfg: Config):
    _WORKER["ctx"] = build_context(cfg)


def _fit_job(args):
    out, sid, model, rep, ref, thresholds = args
    ctx = _WORKER["ctx"]
    return run_fit(ctx, Path(out), sid, model, rep, ref, thresholds)


def run_fit(ctx: Context, out: Path, sid: str, model: str, rep: int, ref: float, thresholds) -> dict:
    """Fit one dataset with one model; errors become diagnostics records."""
    cfg = ctx.cfg
    record = {"scenario_id": sid, "model": model, "replicate": rep}
    path = out / sid / "datasets" / f"rep_{rep:04d}.csv"
    fitdir = out / sid / "fits" / model
    fitdir.mkdir(parents=True, exist_ok=True)
    try:
        ds = read_dataset_csv(path, ctx.pop.raster.shape, sid, rep)
        seed = fit_seed(cfg, sid, model, rep)
        if model == "bym":
            y, p = aggregate_to_units(ds, ctx.part, ctx.pop)
            res = fit_bym(y, p, ctx.structure, cfg.phi_prior, thresholds, cfg.n_samples, seed)
            ids = np.arange(1, len(y) + 1)
        else:
            y, p = aggregate_to_grid(ds, ctx.grid, ctx.pop)
            res = fit_lgcp(y, p, ctx.lgcp, thresholds, cfg.n_samples, seed)
            ids = np.arange(ctx.grid.n_cells)
    except (FitError, DomainError, ParseError, SingularMatrixError, OSError) as exc:
        record.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return record
    stem = fitdir / f"rep_{rep:04d}"
    write_fit_csv(res, f"{stem}.csv", ids)
    write_hyper_csv(res, f"{stem}_hyper.csv")
    np.save(f"{stem}_samples.npy", res.samples.astype(np.float32))
    diag = res.diagnostics
    record.update(
        status="ok",
        runtime_s=diag["runtime_s"],
        hyper_evaluations=diag["hyper_evaluations"],
        newton_iterations_at_mode=diag["newton_iterations_at_mode"],
        grid_size=diag["grid_size"],
        clipped=diag["clipped"],
        hessian_ok=diag["hessian_ok"],
        warnings=diag["warnings"],
        hyper_mode=res.hyper["mode_natural"],
    )
    return record


def cmd_fit(cfg: Config, out_dir, jobs: int | None = None, ctx: Context | None = None) -> list[dict]:
    """Fit every dataset listed in the manifest with every configured model."""
    if not cfg.models:
        raise ConfigurationError("models.models: empty model list")
    out = Path(out_dir)
    manifest = load_manifest(out)
    jobs = resolve_jobs(jobs)
    tasks = []
    for sid, info in manifest["scenarios"].items():
        ref = info["reference_rate"]
        for rep in range(info["replicates"]):
            for model in cfg.models:
                tasks.append((str(out), sid, model, rep, ref, (ref,)))
    if jobs == 1:
        ctx = ctx or build_context(cfg)
        records = [run_fit(ctx, out, *t[1:]) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(cfg,)) as ex:
            records = list(ex.map(_fit_job, tasks, chunksize=1))
    by_sid: dict = {}
    for r in records:
        by_sid.setdefault(r["scenario_id"], []).append(r)
    for sid, recs in by_sid.items():
        recs.sort(key=lambda r: (r["replicate"], r["model"]))
        with open(out / sid / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
            for r in recs:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    failed = [r for r in records if r["status"] != "ok"]
    for r in failed:
        log.warning("fit failed: %s %s rep %d: %s", r["scenario_id"], r["model"], r["replicate"], r["error"])
    return records


def _load_fit(out: Path, sid: str, model: str, rep: int):
    stem = out / sid / "fits" / model / f"rep_{rep:04d}"
    ids, res = read_fit_csv(f"{stem}.csv")
    res.samples = np.load(f"{stem}_samples.npy").astype(np.float64)
    return ids, res


def cmd_evaluate(cfg: Config, out_dir, ctx: Context | None = None) -> dict:
    """Metrics per replicate, per-cell coverage and a scenario summary table."""
    out = Path(out_dir)
    manifest = load_manifest(out)
    ctx = ctx or build_context(cfg)
    grid = ctx.grid
    areas, population = grid.areas(), grid.population
    cell_maps = {"bym": ctx.cell_unit(), "lgcp": np.arange(grid.n_cells)}
    summary_rows = []
    reports = {}
    for sid, info in manifest["scenarios"].items():
        surface = surface_from_dict(info["surface"])
        truth = np.log(surface.risk_at(grid.centroids()))
        mcfg = MetricsConfig(info["reference_rate"], q_grid=tuple(cfg.q_grid))
        with_roc = info["surface"]["shape"] != "flat"
        for model in cfg.models:
            rep_obj = MetricsReport(sid, model)
            hits = np.zeros(grid.n_cells)
            for rep in range(info["replicates"]):
                try:
                    _, res = _load_fit(out, sid, model, rep)
                except (OSError, ParseError, ValueError) as exc:
                    rep_obj.add_gap(rep, type(exc).__name__)
                    continue
                row, delta = evaluate_replicate(truth, res, cell_maps[model], areas, population, mcfg, with_roc)
                row["replicate"] = rep
                rep_obj.rows.append(row)
                hits += delta
                rep_obj.coverage_count += 1
            rep_obj.coverage_hits = hits
            rep_obj.write_csv(out / sid / f"metrics_{model}.csv")
            _write_coverage(rep_obj, out / sid / f"coverage_{model}.csv")
            n_gaps = sum(1 for r in rep_obj.rows if str(r.get("status", "ok")).startswith("missing"))
            for metric, (med, lo, hi) in rep_obj.summary().items():
                n = int(np.isfinite(rep_obj.column(metric)).sum())
                summary_rows.append([sid, model, metric, n, n_gaps, med, lo, hi])
            reports[(sid, model)] = rep_obj
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "model", "metric", "n", "gaps", "median", "p2.5", "p97.5"])
        for r in summary_rows:
            w.writerow(r[:5] + [repr(float(v)) for v in r[5:]])
    return reports


def _write_coverage(rep: MetricsReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "p_g"])
        if rep.coverage_count:
            for g, v in enumerate(rep.p_g()):
                w.writerow([g, repr(float(v))])


def write_pgm(values: np.ndarray, path, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary greyscale image; row 0 of ``values`` is the southern edge."""
    v = np.asarray(values, dtype=float)
    lo = np.nanmin(v) if lo is None else lo
    hi = np.nanmax(v) if hi is None else hi
    scaled = np.full(v.shape, 128.0) if hi <= lo else 255.0 * (v - lo) / (hi - lo)
    img = np.clip(np.round(scaled), 0, 255).astype(np.uint8)[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_pbm(mask: np.ndarray, path) -> None:
    """Plain bitmap, 1 marks a selected cell; north up."""
    m = np.asarray(mask, dtype=bool)[::-1]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P1\n{m.shape[1]} {m.shape[0]}\n")
        for row in m.astype(int):
            fh.write(" ".join(map(str, row)) + "\n")


def read_pnm(path) -> np.ndarray:
    """Inverse of write_pgm / write_pbm (rows returned south first)."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic == b"P5":
        parts = data.split(b"\n", 3)
        w, h = map(int, parts[1].split())
        img = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
    elif magic == b"P1":
        lines = data.decode("ascii").split("\n")
        w, h = map(int, lines[1].split())
        img = np.array([[int(x) for x in ln.split()] for ln in lines[2:2 + h]], dtype=np.uint8)
    else:
        raise ParseError(f"unsupported image format {magic!r}")
    return img[::-1]


def cmd_map(cfg: Config, out_dir, ctx: Context | None = None) -> list[Path]:
    """Heatmaps of posterior mean risk and exceedance plus threshold masks."""
    out = Path(out_dir)
    manifest = load_manifest(out)
    ctx = ctx or build_context(cfg)
    shape = ctx.grid.raster.shape
    cell_maps = {"bym": ctx.cell_unit(), "lgcp": np.arange(ctx.grid.n_cells)}
    written = []
    for sid, info in manifest["scenarios"].items():
        mdir = out / sid / "maps"
        mdir.mkdir(parents=True, exist_ok=True)
        ref = info["reference_rate"]
        for model in cfg.models:
            for rep in cfg.map_replicates:
                path = out / sid / "fits" / model / f"rep_{rep:04d}.csv"
                if not path.is_file():
                    log.warning("no fit at %s; map skipped", path)
                    continue
                _, res = read_fit_csv(path)
                idx = cell_maps[model]
                exc = _exceedance_column(res, ref)[idx].reshape(shape)
                stem = mdir / f"{model}_rep_{rep:04d}"
                write_pgm(res.mean_risk[idx].reshape(shape), f"{stem}_mean_risk.pgm")
                write_pgm(exc, f"{stem}_exceedance.pgm", 0.0, 1.0)
                written += [Path(f"{stem}_mean_risk.pgm"), Path(f"{stem}_exceedance.pgm")]
                for q in cfg.map_thresholds:
                    p = Path(f"{stem}_mask_{q!r}.pbm")
                    write_pbm(exc > q, p)
                    written.append(p)
    return written


def _exceedance_column(res, ref):
    for t, v in res.exceedance.items():
        if np.isclose(t, ref, rtol=1e-12, atol=0):
            return v
    raise DomainError(f"fit has no exceedance column at {ref!r}")


def cmd_sweep(cfg: Config, out_dir, jobs: int | None = None) -> dict:
    """simulate, fit and evaluate over the full factorial scenario set."""
    ctx = build_context(cfg)
    cmd_simulate(cfg, out_dir, sweep=True, ctx=ctx)
    cmd_fit(cfg, out_dir, jobs, ctx=ctx)
    return cmd_evaluate(cfg, out_dir, ctx=ctx)
