"""Finite-element GMRF approximation of a Matérn (nu = 1) field on a lattice mesh."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay, cKDTree
from scipy.special import kv

from .errors import ConfigurationError, DomainError
from .gmrf import cholesky, fill_reducing_order
from .population import Window

NU = 1.0
DIM = 2
MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    interior: np.ndarray
    window: Window
    spacing: float
    extension: float

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    @property
    def outer(self) -> Window:
        return self.window.expand(self.extension)


@dataclass(frozen=True)
class MaternHyper:
    rho: float
    sigma: float

    def __post_init__(self):
        if not (self.rho > 0 and self.sigma > 0):
            raise DomainError("range and sigma must be positive")

    @property
    def kappa(self) -> float:
        return float(np.sqrt(8.0 * NU) / self.rho)


def _signed_areas(nodes, tri):
    p0, p1, p2 = nodes[tri[:, 0]], nodes[tri[:, 1]], nodes[tri[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


def _lattice_nodes(box: Window, spacing: float, lattice: str) -> np.ndarray:
    nx = max(1, int(round(box.width / spacing)))
    if lattice == "square":
        ny = max(1, int(round(box.height / spacing)))
        xs = np.linspace(box.xmin, box.xmax, nx + 1)
        ys = np.linspace(box.ymin, box.ymax, ny + 1)
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])
    if lattice != "equilateral":
        raise ConfigurationError(f"unknown lattice {lattice!r}")
    ny = max(1, int(round(box.height / (spacing * np.sqrt(3.0) / 2.0))))
    dx = box.width / nx
    ys = np.linspace(box.ymin, box.ymax, ny + 1)
    rows = []
    for j, y in enumerate(ys):
        if j % 2 == 0:
            xs = box.xmin + dx * np.arange(nx + 1)
        else:
            xs = np.concatenate([[box.xmin], box.xmin + dx * (np.arange(nx) + 0.5), [box.xmax]])
        xs[-1] = box.xmax
        rows.append(np.column_stack([xs, np.full(len(xs), y)]))
    return np.concatenate(rows)


def build_mesh(window: Window, spacing: float, extension: float = 0.0,
               lattice: str = "equilateral") -> Mesh:
    """Regular triangular lattice over ``window`` grown by ``extension`` on every side."""
    if not spacing > 0:
        raise ConfigurationError("mesh spacing must be positive")
    if extension < 0:
        raise ConfigurationError("mesh extension must be non-negative")
    box = window.expand(extension)
    nodes = _lattice_nodes(box, spacing, lattice)
    tri = Delaunay(nodes).simplices.astype(np.int64)
    area = _signed_areas(nodes, tri)
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    area = np.abs(area)
    tri = tri[area > MIN_TRIANGLE_AREA]
    tol = 1e-9 * max(window.width, window.height)
    interior = (
        (nodes[:, 0] >= window.xmin - tol) & (nodes[:, 0] <= window.xmax + tol)
        & (nodes[:, 1] >= window.ymin - tol) & (nodes[:, 1] <= window.ymax + tol)
    )
    return Mesh(nodes, tri, interior, window, float(spacing), float(extension))


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass ``C`` (diagonal, stored as a vector) and stiffness ``G``."""

    C: np.ndarray
    G: sparse.csr_matrix


def assemble_fem(mesh: Mesh) -> FemMatrices:
    nodes, tri = mesh.nodes, mesh.triangles
    area = _signed_areas(nodes, tri)
    if (area <= MIN_TRIANGLE_AREA).any():
        raise DomainError("degenerate or negatively oriented triangle in mesh")
    n = mesh.n_nodes
    C = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    p = nodes[tri]
    # edge opposite vertex a
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            if a == b:
                continue
            rows.append(tri[:, a])
            cols.append(tri[:, b])
            vals.append((e[:, a] * e[:, b]).sum(axis=1) / (4.0 * area))
    off = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    off.sum_duplicates()
    G = off - sparse.diags(np.asarray(off.sum(axis=1)).ravel())
    return FemMatrices(C, sparse.csr_matrix(G))


def matern_scale(hyper: MaternHyper) -> float:
    """tau^2 so that the nu = 1 field has marginal variance sigma^2."""
    k = hyper.kappa
    return 1.0 / (4.0 * np.pi * k**2 * hyper.sigma**2)


class SpdeOperator:
    """Pre-aligned ``C``, ``G`` and ``G C^{-1} G`` so Q(rho, sigma) is a data-array combination."""

    def __init__(self, fem: FemMatrices):
        n = len(fem.C)
        Cm = sparse.diags(fem.C).tocsr()
        K = (fem.G @ sparse.diags(1.0 / fem.C) @ fem.G).tocsr()
        pattern = (abs(Cm) + abs(fem.G) + abs(K)).tocsr()
        pattern.data[:] = 1.0
        pattern.sort_indices()
        self.pattern = pattern
        self.n = n
        self._parts = [self._align(M) for M in (Cm, fem.G, K)]
        self.C, self.G = fem.C, fem.G
        self._korder = None

    def _align(self, M):
        M = sparse.csr_matrix(M)
        M.sum_duplicates()
        keys = self._keys(self.pattern)
        data = np.zeros(len(keys))
        pos = np.searchsorted(keys, self._keys(M))
        np.add.at(data, pos, M.data)
        return data

    def _keys(self, M):
        rows = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(M.indptr))
        return rows * self.n + M.indices.astype(np.int64)

    def logdet(self, hyper: MaternHyper) -> float:
        """log det Q from the factorisation Q = tau^2 K C^{-1} K with K = kappa^2 C + G."""
        K = sparse.csr_matrix(hyper.kappa**2 * sparse.diags(self.C) + self.G)
        if self._korder is None:
            self._korder = fill_reducing_order(K)
        ld = cholesky(K, perm=self._korder).logdet()
        return float(self.n * np.log(matern_scale(hyper)) + 2.0 * ld - np.log(self.C).sum())

    def precision(self, hyper: MaternHyper) -> sparse.csr_matrix:
        k2 = hyper.kappa**2
        t2 = matern_scale(hyper)
        c, g, kk = self._parts
        data = t2 * (k2 * k2 * c + 2.0 * k2 * g + kk)
        return sparse.csr_matrix((data, self.pattern.indices, self.pattern.indptr),
                                 shape=(self.n, self.n))


def spde_precision(fem: FemMatrices, hyper: MaternHyper) -> sparse.csr_matrix:
    """``tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)`` for alpha = 2."""
    k2 = hyper.kappa**2
    Cm = sparse.diags(fem.C)
    K = fem.G @ sparse.diags(1.0 / fem.C) @ fem.G
    return sparse.csr_matrix(matern_scale(hyper) * (k2 * k2 * Cm + 2.0 * k2 * fem.G + K))


def matern_covariance(h, hyper: MaternHyper):
    """sigma^2 (kappa h) K_1(kappa h)."""
    h = np.asarray(h, dtype=float)
    if (h < 0).any():
        raise DomainError("distance must be non-negative")
    x = hyper.kappa * h
    with np.errstate(invalid="ignore"):
        out = np.where(x > 0, x * kv(1.0, np.where(x > 0, x, 1.0)), 1.0) * hyper.sigma**2
    return float(out) if out.ndim == 0 else out


def projector(mesh: Mesh, points) -> sparse.csr_matrix:
    """Barycentric interpolation weights from mesh nodes to points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.triangles
    P = mesh.nodes[tri]
    cent = P.mean(axis=1)
    k = min(12, len(tri))
    _, cand = cKDTree(cent).query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    best = np.full(len(pts), -1)
    best_w = np.zeros((len(pts), 3))
    best_min = np.full(len(pts), -np.inf)
    for c in range(k):
        t = cand[:, c]
        w = _barycentric(P[t], pts)
        m = w.min(axis=1)
        better = m > best_min
        best[better] = t[better]
        best_w[better] = w[better]
        best_min[better] = m[better]
    tol = 1e-9
    if (best_min < -tol).any():
        bad = int(np.flatnonzero(best_min < -tol)[0])
        raise DomainError(f"point {pts[bad].tolist()} outside the mesh")
    w = np.clip(best_w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(len(pts)), 3)
    A = sparse.coo_matrix((w.ravel(), (rows, tri[best].ravel())), shape=(len(pts), mesh.n_nodes))
    A = A.tocsr()
    A.eliminate_zeros()
    return A


def _barycentric(P, pts):
    p0, p1, p2 = P[:, 0], P[:, 1], P[:, 2]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    dx, dy = pts[:, 0] - p0[:, 0], pts[:, 1] - p0[:, 1]
    w1 = (dx * (p2[:, 1] - p0[:, 1]) - dy * (p2[:, 0] - p0[:, 0])) / det
    w2 = ((p1[:, 0] - p0[:, 0]) * dy - (p1[:, 1] - p0[:, 1]) * dx) / det
    return np.column_stack([1.0 - w1 - w2, w1, w2])


def pc_range_rate(range0: float = 30000.0, p_range: float = 0.5) -> float:
    return -range0 * np.log(p_range)


def pc_log_prior_range_sigma(hyper: MaternHyper, range0: float = 30000.0, p_range: float = 0.5,
                             sigma0: float = 1.0, p_sigma: float = 0.01) -> float:
    """Joint PC prior for (range, sd) with P(range < range0) = p_range, P(sd > sigma0) = p_sigma."""
    lr = pc_range_rate(range0, p_range)
    ls = -np.log(p_sigma) / sigma0
    return float(np.log(lr) - 2.0 * np.log(hyper.rho) - lr / hyper.rho
                 + np.log(ls) - ls * hyper.sigma)


def write_mesh_csv(mesh: Mesh, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "mesh_nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "x", "y", "interior"])
        for i, (x, y) in enumerate(mesh.nodes):
            w.writerow([i, repr(float(x)), repr(float(y)), int(mesh.interior[i])])
    with open(d / "mesh_triangles.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tri_id", "n0", "n1", "n2"])
        for t, (a, b, c) in enumerate(mesh.triangles):
            w.writerow([t, int(a), int(b), int(c)])
