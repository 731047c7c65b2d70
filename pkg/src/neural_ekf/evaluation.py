"""Prediction-error metrics and RMSE-based anomaly clustering."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .util import worker_count


def rmse(predicted, actual) -> np.ndarray:
    """Per-channel root-mean-square error of two ``(T, d)`` arrays."""
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise ContractError(f"predicted shape {p.shape} differs from actual shape {a.shape}")
    if p.ndim == 1:
        p, a = p[:, None], a[:, None]
    return np.sqrt(np.mean((p - a) ** 2, axis=0))


def nrmse(predicted, actual) -> np.ndarray:
    """RMSE divided by the per-channel standard deviation of ``actual``."""
    a = np.asarray(actual, dtype=float)
    sd = a.std(axis=0) if a.ndim > 1 else np.atleast_1d(a.std())
    return rmse(predicted, actual) / sd


@dataclass
class PcaResult:
    projection: np.ndarray  # (n, c)
    basis: np.ndarray  # (c, d), rows orthonormal
    explained_variance: np.ndarray  # (c,)
    mean: np.ndarray  # (d,)

    def reconstruct(self) -> np.ndarray:
        return self.projection @ self.basis + self.mean


def pca_project(vectors, components: int = 2) -> PcaResult:
    """Project onto the top eigenvectors of the sample covariance.

    Each basis vector is signed so its largest-magnitude entry is positive.
    ``components`` is capped at the data dimension.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2:
        raise ContractError(f"expected an (n, d) matrix, got shape {X.shape}")
    n, d = X.shape
    if n < 2:
        raise ContractError(f"PCA needs at least 2 vectors, got {n}")
    c = min(components, d)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:c]
    basis = evecs[:, order].T.copy()
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = np.clip(evals[order], 0.0, None)
    return PcaResult(Xc @ basis.T, basis, var, mean)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    trace: list = field(default_factory=list)  # inertia after each assignment step
    iterations: int = 0


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp(points, k, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).min(axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def lloyd(points, k: int, rng: np.random.Generator, tol: float = 1e-9, max_iter: int = 300) -> KMeansResult:
    """Single k-means run: k-means++ seeding then Lloyd iterations."""
    centroids = _kmeans_pp(points, k, rng)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        labels = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(len(points)), labels].sum()))
        new = centroids.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        moved = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if moved < tol:
            break
    d2 = _sq_dists(points, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return KMeansResult(labels, centroids, inertia, trace, it)


def kmeans(points, k: int, seed: int = 0, restarts: int = 10) -> KMeansResult:
    """Best-of-``restarts`` k-means; each restart has its own spawned seed."""
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise ContractError(f"expected an (n, d) matrix, got shape {P.shape}")
    if k < 1 or k > len(P):
        raise ContractError(f"k = {k} must lie in [1, {len(P)}]")
    seeds = np.random.SeedSequence(seed).spawn(max(1, restarts))
    with ThreadPoolExecutor(max_workers=min(worker_count(), len(seeds))) as ex:
        runs = list(ex.map(lambda s: lloyd(P, k, np.random.default_rng(s)), seeds))
    best = runs[0]
    for r in runs[1:]:
        if r.inertia < best.inertia:
            best = r
    return best


@dataclass
class ClusterReport:
    labels: list  # case labels, ordered by cluster then input order
    projection: np.ndarray  # (n, c) rows aligned with ``labels``
    assignments: dict  # label -> cluster id (0 = baseline cluster)
    components: np.ndarray  # (c, d)
    explained_variance: np.ndarray
    centroids: np.ndarray  # (k, c), row j is cluster j
    inertia: float
    baseline: str
    centroid_distance: np.ndarray = None  # distance of each centroid from the baseline centroid

    def clusters(self) -> list[list[str]]:
        k = len(self.centroids)
        return [[lab for lab in self.labels if self.assignments[lab] == j] for j in range(k)]

    def write(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        c = self.projection.shape[1]
        pcs = [f"pc{i + 1}" for i in range(c)]
        with open(out / "assignments.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "cluster", *pcs])
            for lab, row in zip(self.labels, self.projection):
                w.writerow([lab, self.assignments[lab], *map(repr, map(float, row))])
        with open(out / "centroids.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster", *pcs, "distance_from_baseline"])
            for j, row in enumerate(self.centroids):
                w.writerow([j, *map(repr, map(float, row)), repr(float(self.centroid_distance[j]))])
        with open(out / "components.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "explained_variance", *[f"ch{i}" for i in range(self.components.shape[1])]])
            for i, row in enumerate(self.components):
                w.writerow([pcs[i], repr(float(self.explained_variance[i])), *map(repr, map(float, row))])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            w.writerow(["inertia", repr(float(self.inertia))])
            w.writerow(["baseline", self.baseline])
        return out

    @classmethod
    def read(cls, directory) -> "ClusterReport":
        d = Path(directory)
        with open(d / "assignments.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        labels = [r[0] for r in rows]
        assignments = {r[0]: int(r[1]) for r in rows}
        projection = np.array([[float(v) for v in r[2:]] for r in rows])
        with open(d / "centroids.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        centroids = np.array([[float(v) for v in r[1:-1]] for r in rows])
        dist = np.array([float(r[-1]) for r in rows])
        with open(d / "components.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        ev = np.array([float(r[1]) for r in rows])
        comps = np.array([[float(v) for v in r[2:]] for r in rows])
        with open(d / "summary.csv", newline="") as fh:
            summary = {r[0]: r[1] for r in list(csv.reader(fh))[1:]}
        return cls(labels, projection, assignments, comps, ev, centroids, float(summary["inertia"]),
                   summary["baseline"], dist)


def anomaly_report(cases, k: int = 3, seed: int = 0, baseline: str | None = None,
                   standardize: bool = False, restarts: int = 10) -> ClusterReport:
    """PCA (two components) then k-means on a list of ``(label, rmse_vector)``.

    Cluster ids are renumbered so that 0 holds ``baseline`` (default: the first
    label) and ids increase with centroid distance from that cluster. With
    ``standardize`` every channel is z-scored across cases before PCA.
    """
    labels = [str(lab) for lab, _ in cases]
    if len(set(labels)) != len(labels):
        raise ContractError("case labels must be unique")
    if len(labels) < k:
        raise ContractError(f"need at least k = {k} cases, got {len(labels)}")
    X = np.array([np.asarray(v, dtype=float).ravel() for _, v in cases])
    if standardize:
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    base = labels[0] if baseline is None else baseline
    if base not in labels:
        raise ContractError(f"baseline label {base!r} is not among the cases")
    pca = pca_project(X, 2)
    km = kmeans(pca.projection, k, seed=seed, restarts=restarts)
    b = km.assignments[labels.index(base)]
    dist = np.linalg.norm(km.centroids - km.centroids[b], axis=1)
    order = sorted(range(k), key=lambda j: (dist[j], j != b, j))
    remap = {old: new for new, old in enumerate(order)}
    new_assign = np.array([remap[a] for a in km.assignments])
    rows = sorted(range(len(labels)), key=lambda i: (new_assign[i], i))
    return ClusterReport(
        labels=[labels[i] for i in rows],
        projection=pca.projection[rows],
        assignments={labels[i]: int(new_assign[i]) for i in range(len(labels))},
        components=pca.basis,
        explained_variance=pca.explained_variance,
        centroids=km.centroids[order],
        inertia=km.inertia,
        baseline=base,
        centroid_distance=dist[order],
    )
