"""Seeded spherical k-means over memory snapshots.

Lloyd iterations with cosine similarity: points are assigned to the centroid
of maximum cosine, and each centroid is the re-normalized mean of its
members. Initialization is k-means++ style on the cosine distance 1 - cos.
Empty clusters are repaired by re-seeding them at the point currently
farthest (lowest cosine) from its own centroid. Inertia, defined as
sum(1 - cos(point, assigned centroid)), is recorded after every assignment
step and checked to be non-increasing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import NORM_GUARD, l2_normalize_rows
from .seeding import substream


@dataclass(frozen=True)
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: tuple
    n_iter: int


@dataclass(frozen=True)
class PrototypeSet:
    """R clusterings of one modality: centroid matrices and assignments."""

    modality: str
    k_list: tuple
    centroids: tuple          # one (K_r, d) unit-norm matrix per clustering
    assignments: np.ndarray   # (R, N) centroid index per instance
    inertias: tuple

    @property
    def num_clusterings(self) -> int:
        return len(self.k_list)


def _check_unit_points(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {points.shape}")
    norms = np.linalg.norm(points, axis=1)
    if not np.isfinite(points).all() or np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError("points must be finite unit-norm rows")
    return points


def _plus_plus_init(points, k, rng):
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    # squared cosine distance to the nearest chosen centroid
    dist = 1.0 - points @ points[chosen[0]]
    np.maximum(dist, 0.0, out=dist)
    for _ in range(1, k):
        weights = dist ** 2
        total = weights.sum()
        if total < 1e-15:
            remaining = [i for i in range(n) if i not in set(chosen)]
            chosen.append(remaining[0])
        else:
            chosen.append(int(rng.choice(n, p=weights / total)))
        cand = 1.0 - points @ points[chosen[-1]]
        np.maximum(cand, 0.0, out=cand)
        dist = np.minimum(dist, cand)
    return points[chosen].copy()


def _lloyd(points, k, rng, max_iters):
    n = points.shape[0]
    centroids = _plus_plus_init(points, k, rng)
    assignments = np.full(n, -1)
    history = []
    for iteration in range(max_iters):
        sims = points @ centroids.T
        new_assignments = sims.argmax(axis=1)
        inertia = float((1.0 - sims[np.arange(n), new_assignments]).sum())
        if history and inertia > history[-1] + 1e-12:
            raise AssertionError(
                f"inertia increased across Lloyd iterations: "
                f"{history[-1]} -> {inertia}"
            )
        history.append(inertia)
        converged = bool((new_assignments == assignments).all())
        assignments = new_assignments
        if converged:
            break
        # update step
        for c in range(k):
            members = points[assignments == c]
            if len(members) == 0:
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm >= NORM_GUARD:
                centroids[c] = mean / norm
        # empty-cluster repair: seed at the worst-served point
        empty = [c for c in range(k) if not (assignments == c).any()]
        if empty:
            own_sim = sims[np.arange(n), assignments].copy()
            for c in empty:
                worst = int(own_sim.argmin())
                centroids[c] = points[worst]
                own_sim[worst] = np.inf
    return KmeansResult(
        centroids=centroids,
        assignments=assignments,
        inertia=history[-1],
        inertia_history=tuple(history),
        n_iter=len(history),
    )


def kmeans(points, k: int, seed: int, max_iters: int = 100,
           restarts: int = 1) -> KmeansResult:
    """Spherical k-means; with ``restarts`` > 1 the lowest-inertia run wins."""
    points = _check_unit_points(points)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if restarts < 1 or max_iters < 1:
        raise ValueError("restarts and max_iters must be >= 1")
    if k > 1 and np.abs(points - points[0]).max() < 1e-12:
        raise ValueError(f"all points identical; cannot form {k} clusters")
    best = None
    for r in range(restarts):
        result = _lloyd(points, k, substream(seed, "restart", r), max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def build_prototypes(voice_snapshot, face_snapshot, k_list, seed: int,
                     max_iters: int = 100, restarts: int = 1):
    """Cluster each modality's memories once per entry of ``k_list``."""
    if len(k_list) < 1:
        raise ValueError("k_list must be non-empty")
    sets = []
    for modality, snap in (("voice", voice_snapshot), ("face", face_snapshot)):
        centroids = []
        assignments = []
        inertias = []
        for r, k in enumerate(k_list):
            result = kmeans(
                snap,
                k,
                seed=substream(seed, "kmeans", modality, r).integers(2 ** 63),
                max_iters=max_iters,
                restarts=restarts,
            )
            centroids.append(result.centroids)
            assignments.append(result.assignments)
            inertias.append(result.inertia)
        sets.append(
            PrototypeSet(
                modality=modality,
                k_list=tuple(int(k) for k in k_list),
                centroids=tuple(centroids),
                assignments=np.stack(assignments),
                inertias=tuple(inertias),
            )
        )
    return sets[0], sets[1]
