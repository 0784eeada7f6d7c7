"""Seeded k-means with k-means++ initialization and exact tie rules.

Determinism contract: fitting is single-threaded and driven by numpy's
PCG64 generator (``np.random.default_rng(seed)``).  Draw order is fixed:

1. one ``integers(n)`` draw for the first k-means++ centroid,
2. per additional centroid, one ``random()`` draw turned into a
   D^2-weighted choice via cumulative sums (falling back to one
   ``integers(n)`` draw when every remaining distance is zero).

Identical (points, k, seed) therefore yield bit-identical centroids.

Assignment ties always break to the lowest centroid index.  Empty
clusters are repaired each iteration by moving the point farthest from
its current centroid (lowest point index on ties, donors must keep at
least one member).  Convergence requires both the max centroid shift to
drop below `tolerance` and the assignment to be stable, which makes every
tolerance-converged model an exact Lloyd fixed point.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import EmbeddingVector
from .serde import MODEL_FLOAT_SPEC, read_json, write_canonical_json


class ClusteringError(Exception):
    """Raised for invalid clustering inputs."""


@dataclass(frozen=True)
class CentroidModel:
    k: int
    dims: int
    centroids: tuple[tuple[float, ...], ...]
    seed: int
    iterations_run: int
    inertia: float

    def centroid_array(self) -> np.ndarray:
        return np.asarray(self.centroids, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "dims": self.dims,
            "seed": self.seed,
            "iterations_run": self.iterations_run,
            "inertia": self.inertia,
            "centroids": [list(row) for row in self.centroids],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CentroidModel":
        return cls(
            k=int(obj["k"]),
            dims=int(obj["dims"]),
            centroids=tuple(tuple(float(v) for v in row) for row in obj["centroids"]),
            seed=int(obj["seed"]),
            iterations_run=int(obj["iterations_run"]),
            inertia=float(obj["inertia"]),
        )


@dataclass(frozen=True)
class ClusterAssignment:
    point_index: int
    cluster: int
    distance_sq: float


def as_matrix(points: Sequence) -> np.ndarray:
    """Coerce EmbeddingVectors / sequences / arrays into an (n, d) float64 matrix."""
    if isinstance(points, np.ndarray):
        mat = np.asarray(points, dtype=np.float64)
        if mat.ndim != 2:
            raise ClusteringError(f"expected a 2-D array, got shape {mat.shape}")
        return mat
    rows = []
    dims = None
    for i, p in enumerate(points):
        row = list(p.values) if isinstance(p, EmbeddingVector) else [float(v) for v in p]
        if dims is None:
            dims = len(row)
        elif len(row) != dims:
            raise ClusteringError(f"point {i} has {len(row)} dims, expected {dims}")
        rows.append(row)
    if not rows:
        raise ClusteringError("no points given")
    return np.asarray(rows, dtype=np.float64)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, computed elementwise for determinism."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = int(rng.integers(n))
    best = np.einsum("nd,nd->n", points - points[chosen[0]], points - points[chosen[0]])
    for j in range(1, k):
        total = float(best.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(min(np.searchsorted(np.cumsum(best), r, side="right"), n - 1))
        chosen[j] = idx
        d = np.einsum("nd,nd->n", points - points[idx], points - points[idx])
        best = np.minimum(best, d)
    return points[chosen].copy()


def fit_kmeans(
    points: Sequence,
    k: int,
    seed: int,
    max_iterations: int = 100,
    tolerance: float = 1e-6,
    debug_checks: bool = False,
) -> CentroidModel:
    """Fit k-means with k-means++ seeding and Lloyd iterations.

    `debug_checks` asserts the per-iteration inertia never increases.
    """
    mat = as_matrix(points)
    n, dims = mat.shape
    if k <= 0:
        raise ClusteringError(f"k must be positive, got {k}")
    if k > n:
        raise ClusteringError(f"k={k} exceeds number of points ({n})")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(mat, k, rng)

    prev_labels: np.ndarray | None = None
    prev_inertia = np.inf
    iterations_run = 0
    for it in range(1, max_iterations + 1):
        iterations_run = it
        dists = _sq_dists(mat, centroids)
        labels = np.argmin(dists, axis=1)  # ties -> lowest index

        # Empty-cluster repair: recentre the empty cluster on the point
        # farthest from its assigned centroid (donor keeps >= 1 member).
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                continue
            point_d = dists[np.arange(n), labels]
            candidates = np.where(counts[labels] >= 2)[0]
            if candidates.size == 0:
                break
            far = int(candidates[np.argmax(point_d[candidates])])
            counts[labels[far]] -= 1
            labels[far] = j
            counts[j] = 1
            centroids[j] = mat[far]

        if debug_checks:
            inertia_now = float(_sq_dists(mat, centroids)[np.arange(n), labels].sum())
            assert inertia_now <= prev_inertia + 1e-9, "inertia increased across Lloyd iterations"
            prev_inertia = inertia_now

        new_centroids = np.empty_like(centroids)
        for j in range(k):
            members = mat[labels == j]
            new_centroids[j] = members.mean(axis=0) if members.shape[0] else centroids[j]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids

        if prev_labels is not None and np.array_equal(labels, prev_labels) and shift < tolerance:
            break
        prev_labels = labels

    final_dists = _sq_dists(mat, centroids)
    inertia = float(final_dists.min(axis=1).sum())
    return CentroidModel(
        k=k,
        dims=dims,
        centroids=tuple(tuple(float(v) for v in row) for row in centroids),
        seed=seed,
        iterations_run=iterations_run,
        inertia=inertia,
    )


def fit_kmeans_restarts(
    points: Sequence,
    k: int,
    seed: int,
    n_restarts: int = 1,
    max_iterations: int = 100,
    tolerance: float = 1e-6,
) -> CentroidModel:
    """Best-of-n restarts (restart i uses seed + i); lowest inertia wins, ties by restart order."""
    if n_restarts < 1:
        raise ClusteringError(f"n_restarts must be >= 1, got {n_restarts}")
    best: CentroidModel | None = None
    for i in range(n_restarts):
        model = fit_kmeans(points, k, seed + i, max_iterations, tolerance)
        if best is None or model.inertia < best.inertia:
            best = model
    assert best is not None
    return best


def _point_vector(point) -> np.ndarray:
    if isinstance(point, EmbeddingVector):
        return np.asarray(point.values, dtype=np.float64)
    return np.asarray(point, dtype=np.float64)


def assign(model: CentroidModel, point, point_index: int = 0) -> ClusterAssignment:
    """Exhaustive argmin over centroids by squared distance; ties -> lowest index."""
    vec = _point_vector(point)
    if vec.shape != (model.dims,):
        raise ClusteringError(f"point has dims {vec.shape}, model expects ({model.dims},)")
    diff = model.centroid_array() - vec[None, :]
    d2 = np.einsum("kd,kd->k", diff, diff)
    cluster = int(np.argmin(d2))
    return ClusterAssignment(point_index=point_index, cluster=cluster, distance_sq=float(d2[cluster]))


def assign_many(model: CentroidModel, points: Sequence) -> list[ClusterAssignment]:
    mat = as_matrix(points)
    if mat.shape[1] != model.dims:
        raise ClusteringError(f"points have dims {mat.shape[1]}, model expects {model.dims}")
    d2 = _sq_dists(mat, model.centroid_array())
    labels = np.argmin(d2, axis=1)
    return [
        ClusterAssignment(point_index=i, cluster=int(labels[i]), distance_sq=float(d2[i, labels[i]]))
        for i in range(mat.shape[0])
    ]


def inertia_of(model: CentroidModel, points: Sequence) -> float:
    """Sum over points of the squared distance to the nearest centroid."""
    mat = as_matrix(points)
    if mat.shape[1] != model.dims:
        raise ClusteringError(f"points have dims {mat.shape[1]}, model expects {model.dims}")
    return float(_sq_dists(mat, model.centroid_array()).min(axis=1).sum())


def is_lloyd_fixed_point(model: CentroidModel, points: Sequence, atol: float = 0.0) -> bool:
    """True when re-running one Lloyd step leaves the model unchanged.

    Checks both conditions: every point is nearest its assigned centroid
    (assignment recomputed with the model's tie rule) and every centroid
    equals the mean of its members.
    """
    mat = as_matrix(points)
    cents = model.centroid_array()
    labels = np.argmin(_sq_dists(mat, cents), axis=1)
    for j in range(model.k):
        members = mat[labels == j]
        if members.shape[0] == 0:
            return False
        mean = members.mean(axis=0)
        if atol == 0.0:
            if not np.array_equal(mean, cents[j]):
                return False
        elif not np.allclose(mean, cents[j], rtol=0.0, atol=atol):
            return False
    return True


def save_centroid_model(model: CentroidModel, path: Path | str) -> None:
    write_canonical_json(path, model.to_dict(), float_spec=MODEL_FLOAT_SPEC)


def load_centroid_model(path: Path | str) -> CentroidModel:
    return CentroidModel.from_dict(read_json(path))
