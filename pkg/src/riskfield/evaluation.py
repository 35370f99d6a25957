"""Risk-surface recovery and high-risk detection metrics over replicate fits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError

DEFAULT_Q_GRID = tuple(round(0.05 * i, 2) for i in range(20))
RMISE_VARIANTS = (("unit", "log"), ("unit", "risk"), ("population-density", "log"),
                  ("population-density", "risk"))


@dataclass(frozen=True)
class MetricsConfig:
    """Metric settings; ``reference_rate`` is both the exceedance level and the truth cut."""

    reference_rate: float
    b_mode: str = "unit"
    scale: str = "log"
    q_grid: tuple | None = DEFAULT_Q_GRID
    truth_threshold: float | None = None

    def __post_init__(self):
        if not self.reference_rate > 0:
            raise ConfigurationError("reference_rate must be positive")
        if self.b_mode not in ("unit", "population-density"):
            raise ConfigurationError(f"b_mode: unknown value {self.b_mode!r}")
        if self.scale not in ("log", "risk"):
            raise ConfigurationError(f"scale: unknown value {self.scale!r}")
        if self.q_grid is not None:
            q = np.asarray(self.q_grid, dtype=float)
            if len(q) == 0 or (np.diff(q) <= 0).any() or q[0] < 0 or q[-1] >= 1:
                raise ConfigurationError("q_grid must be strictly increasing within [0, 1)")

    @property
    def high_risk_cut(self) -> float:
        return self.reference_rate if self.truth_threshold is None else self.truth_threshold


def _on_scale(eta, scale):
    return np.asarray(eta, dtype=float) if scale == "log" else np.exp(eta)


def rmise(truth_eta, sample_eta, b, areas, scale: str = "log") -> float:
    """sqrt of the sample average of sum_g b_g |D_g| (R_hat_g - R_g)^2.

    ``truth_eta`` is the true log-risk per cell; ``sample_eta`` holds posterior
    draws of the log-risk (draws x cells).
    """
    truth = np.asarray(truth_eta, dtype=float)
    S = np.atleast_2d(np.asarray(sample_eta, dtype=float))
    if S.shape[1] != len(truth) or len(b) != len(truth) or len(areas) != len(truth):
        raise DomainError(f"sample/cell mismatch: {S.shape[1]} sample columns for {len(truth)} cells")
    wts = np.asarray(b, dtype=float) * np.asarray(areas, dtype=float)
    err = (_on_scale(S, scale) - _on_scale(truth, scale)) ** 2
    return float(np.sqrt((err @ wts).mean()))


def covered(truth_eta, lower, upper) -> np.ndarray:
    """delta indicators: truth inside the closed credible interval."""
    t = np.asarray(truth_eta, dtype=float)
    return (np.asarray(lower) <= t) & (t <= np.asarray(upper))


def coverage(truth_eta, lower, upper):
    """(p_g over replicates, p_j over cells) from J x G interval bounds."""
    delta = np.atleast_2d(covered(truth_eta, lower, upper))
    J, G = delta.shape
    hits = delta.sum(axis=0), delta.sum(axis=1)
    return hits[0] / J, hits[1] / G


@dataclass
class RocResult:
    q: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_auc(truth_high, scores, weights=None, q_grid=DEFAULT_Q_GRID) -> RocResult:
    """Weighted ROC for ``B_q = {scores > q}`` against the true set ``A``.

    ``q_grid=None`` uses every distinct score as a cut (plus one below all of
    them), which makes the curve invariant to monotone score transforms.
    Points (0,0) and (1,1) close the curve; AUC by the trapezoid rule.
    """
    A = np.asarray(truth_high, dtype=bool)
    s = np.asarray(scores, dtype=float)
    w = np.ones(len(A)) if weights is None else np.asarray(weights, dtype=float)
    if not (len(s) == len(A) == len(w)):
        raise DomainError("truth, scores and weights differ in length")
    wA, wN = w[A].sum(), w[~A].sum()
    if wA <= 0:
        raise ConfigurationError("true high-risk set is empty")
    if wN <= 0:
        raise ConfigurationError("true high-risk set covers everything")
    if q_grid is None:
        u = np.unique(s)
        q = np.concatenate([[u[0] - 1.0], u])
    else:
        q = np.asarray(q_grid, dtype=float)
    B = s[None, :] > q[:, None]
    sens = (B & A).astype(float) @ w / wA
    spec = (~B & ~A).astype(float) @ w / wN
    # B_q shrinks as q grows, so walking q downwards traces the curve in order
    down = np.argsort(-q, kind="stable")
    fpr = np.concatenate([[0.0], ((B & ~A).astype(float) @ w / wN)[down], [1.0]])
    tpr = np.concatenate([[0.0], sens[down], [1.0]])
    auc = float(np.sum(np.diff(fpr) * 0.5 * (tpr[1:] + tpr[:-1])))
    return RocResult(q, sens, spec, fpr, tpr, auc)


def summarize(values) -> tuple[float, float, float]:
    """(median, 2.5th, 97.5th) percentiles with linear interpolation, ignoring gaps."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return (np.nan, np.nan, np.nan)
    p = np.percentile(v, [50.0, 2.5, 97.5], method="linear")
    return float(p[0]), float(p[1]), float(p[2])


@dataclass
class MetricsReport:
    """Per-replicate metric rows for one (scenario, model), plus per-cell coverage."""

    scenario_id: str
    model: str
    rows: list = field(default_factory=list)
    coverage_hits: np.ndarray | None = None
    coverage_count: int = 0

    def add_gap(self, replicate: int, reason: str):
        self.rows.append({"replicate": replicate, "status": f"missing: {reason}"})

    def metric_names(self) -> list[str]:
        names = []
        for r in self.rows:
            for k in r:
                if k not in ("replicate", "status") and k not in names:
                    names.append(k)
        return names

    def column(self, name) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def p_g(self) -> np.ndarray:
        if self.coverage_hits is None or self.coverage_count == 0:
            raise DomainError("no coverage data recorded")
        return self.coverage_hits / self.coverage_count

    def summary(self) -> dict:
        return {m: summarize(self.column(m)) for m in self.metric_names()}

    def write_csv(self, path) -> None:
        names = self.metric_names()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario_id", "model", "replicate", "status"] + names)
            for r in sorted(self.rows, key=lambda r: r["replicate"]):
                w.writerow([self.scenario_id, self.model, r["replicate"], r.get("status", "ok")]
                           + [_cell(r.get(m)) for m in names])


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return repr(float(v))


def cell_posterior(fit, cell_to_target):
    """Map target-level summaries onto evaluation cells (identity for LGCP)."""
    idx = np.asarray(cell_to_target)
    samples = None if fit.samples is None else fit.samples[:, idx]
    exc = {t: v[idx] for t, v in fit.exceedance.items()}
    return fit.q025_eta[idx], fit.q975_eta[idx], samples, exc


def evaluate_replicate(truth_eta, fit, cell_to_target, areas, population, cfg: MetricsConfig,
                       with_roc: bool = True) -> tuple[dict, np.ndarray]:
    """Metric row for one fitted replicate and its per-cell coverage indicators."""
    lo, hi, samples, exc = cell_posterior(fit, cell_to_target)
    if samples is None or len(samples) < 100:
        raise DomainError("at least 100 posterior samples per cell are needed for RMISE")
    row = {}
    dens = np.asarray(population, dtype=float) / np.asarray(areas, dtype=float)
    for b_mode, scale in RMISE_VARIANTS:
        b = np.ones(len(areas)) if b_mode == "unit" else dens
        key = f"rmise_{'area' if b_mode == 'unit' else 'pop'}_{scale}"
        row[key] = rmise(truth_eta, samples, b, areas, scale)
    delta = covered(truth_eta, lo, hi)
    row["coverage"] = float(delta.mean())
    if with_roc:
        ref = cfg.reference_rate
        if ref not in exc:
            raise DomainError(f"fit lacks exceedance probabilities at {ref!r}")
        A = np.exp(truth_eta) > cfg.high_risk_cut
        for label, w in (("area", np.asarray(areas, dtype=float)), ("pop", np.asarray(population, dtype=float))):
            r = roc_auc(A, exc[ref], w, cfg.q_grid)
            row[f"auc_{label}"] = r.auc
    return row, delta
