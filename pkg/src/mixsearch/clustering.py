"""K-means clustering over embedding vectors.

Lloyd's algorithm with k-means++ seeding, restarted a configurable number of
times with the best run (lowest inertia) kept.  Empty clusters are repaired
by promoting the worst-fit point to be the empty cluster's centroid, so the
model always exposes exactly k populated clusters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray         # (k, dims)
    assignments: np.ndarray       # (n,) int64 cluster ids
    sizes: np.ndarray             # (k,) int64 member counts
    inertia: float
    n_iter: int
    inertia_history: list[float]  # per-iteration inertia of the winning run

    def __post_init__(self) -> None:
        if self.sizes.sum() != self.assignments.shape[0]:
            raise ClusteringError("cluster sizes do not sum to the point count")
        if np.any(self.assignments < 0) or np.any(self.assignments >= self.k):
            raise ClusteringError("assignment outside [0, k)")
        if not np.all(np.isfinite(self.centroids)):
            raise ClusteringError("non-finite centroid")
        if self.inertia < 0:
            raise ClusteringError("negative inertia")


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, computed per centroid.

    The per-centroid difference keeps the arithmetic symmetric, so points
    exactly equidistant from two centroids produce exactly equal entries.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if points.ndim != 2 or centroids.ndim != 2:
        raise ClusteringError("points and centroids must be 2-D")
    if points.shape[1] != centroids.shape[1]:
        raise ClusteringError(
            f"dimension mismatch: points have {points.shape[1]}, "
            f"centroids have {centroids.shape[1]}")
    out = np.empty((points.shape[0], centroids.shape[0]), dtype=np.float64)
    for j in range(centroids.shape[0]):
        diff = points - centroids[j]
        out[:, j] = np.einsum("nd,nd->n", diff, diff)
    return out


def assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid assignment; ties go to the lowest cluster id."""
    return np.argmin(squared_distances(points, centroids), axis=1).astype(np.int64)


def inertia(points: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    assignments = np.asarray(assignments)
    if assignments.shape[0] != points.shape[0]:
        raise ClusteringError("one assignment per point required")
    diff = points - centroids[assignments]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_init_plusplus(points: np.ndarray, k: int,
                         seed: int | np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centroid uniform, each next one drawn with
    probability proportional to its squared distance to the nearest chosen
    centroid.  Deterministic for a fixed seed."""
    points = np.asarray(points, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = points.shape[0]
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    n_distinct = np.unique(points, axis=0).shape[0]
    if k > n_distinct:
        raise ClusteringError(
            f"k={k} exceeds the number of distinct points ({n_distinct})")

    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.einsum("nd,nd->n", points - centroids[0], points - centroids[0])
    for j in range(1, k):
        total = d2.sum()
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centroids[j] = points[idx]
        diff = points - centroids[j]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
    return centroids


def kmeans_fit(points: np.ndarray, k: int, max_iter: int = 300,
               tol: float = 1e-6, seed: int = 0, n_init: int = 10) -> ClusterModel:
    """Fit k-means with ``n_init`` seeded restarts, keeping the best inertia.

    Convergence: maximum centroid displacement below ``tol`` or ``max_iter``
    iterations.  Raises on degenerate input (all points identical with k > 1)
    and when k exceeds the number of distinct points.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ClusteringError("points must be a non-empty 2-D array")
    if max_iter < 1:
        raise ClusteringError("max_iter must be >= 1")
    if tol < 0:
        raise ClusteringError("tol must be >= 0")
    n_distinct = np.unique(points, axis=0).shape[0]
    if n_distinct == 1 and k > 1:
        raise ClusteringError(
            f"degenerate input: all {points.shape[0]} points identical, cannot fit k={k}")
    if k > n_distinct:
        raise ClusteringError(
            f"k={k} exceeds the number of distinct points ({n_distinct})")

    streams = np.random.SeedSequence(seed).spawn(n_init)
    best: tuple | None = None
    for stream in streams:
        run = _lloyd_once(points, k, max_iter, tol, np.random.default_rng(stream))
        if best is None or run[2] < best[2]:
            best = run
    centroids, assignments, final_inertia, history, n_iter = best
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assignments,
        sizes=np.bincount(assignments, minlength=k).astype(np.int64),
        inertia=final_inertia,
        n_iter=n_iter,
        inertia_history=history,
    )


def _lloyd_once(points: np.ndarray, k: int, max_iter: int, tol: float,
                rng: np.random.Generator):
    centroids = kmeans_init_plusplus(points, k, rng)
    history: list[float] = []
    assignments = np.zeros(points.shape[0], dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        assignments = assign(points, centroids)
        assignments, centroids = _repair_empty(points, assignments, centroids, k)
        cur = inertia(points, assignments, centroids)
        if history and cur > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise RuntimeError(
                f"inertia increased between Lloyd iterations ({history[-1]} -> {cur})")
        history.append(cur)
        new_centroids = _cluster_means(points, assignments, k)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    assignments = assign(points, centroids)
    assignments, centroids = _repair_empty(points, assignments, centroids, k)
    final = inertia(points, assignments, centroids)
    if history and final > history[-1] + 1e-9 * max(1.0, history[-1]):
        raise RuntimeError("inertia increased at the final assignment")
    history.append(final)
    return centroids, assignments, final, history, it


def _cluster_means(points: np.ndarray, assignments: np.ndarray, k: int) -> np.ndarray:
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    for j in range(k):
        members = points[assignments == j]
        centroids[j] = members.mean(axis=0)
    return centroids


def _repair_empty(points: np.ndarray, assignments: np.ndarray,
                  centroids: np.ndarray, k: int):
    """Give each empty cluster the point currently farthest from its centroid.

    Donor clusters of size 1 are skipped so the repair cannot cascade.
    """
    sizes = np.bincount(assignments, minlength=k)
    empties = np.flatnonzero(sizes == 0)
    if empties.size == 0:
        return assignments, centroids
    assignments = assignments.copy()
    centroids = centroids.copy()
    diff = points - centroids[assignments]
    dist = np.einsum("nd,nd->n", diff, diff)
    for e in empties:
        eligible = sizes[assignments] > 1
        if not eligible.any():
            raise ClusteringError("cannot repair empty cluster: no donor available")
        masked = np.where(eligible, dist, -np.inf)
        idx = int(np.argmax(masked))
        sizes[assignments[idx]] -= 1
        assignments[idx] = e
        sizes[e] = 1
        centroids[e] = points[idx]
        dist[idx] = 0.0
    return assignments, centroids
