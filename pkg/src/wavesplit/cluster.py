"""K-means with k-means++ seeding, restarts and empty-cluster repair.

Used at inference to aggregate the per-timestep speaker vectors into one
centroid per source.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass
class KMeansConfig:
    n_clusters: int
    max_iters: int = 100
    tolerance: float = 1e-6
    n_restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_restarts < 1:
            raise ContractViolation("n_clusters and n_restarts must be >= 1")


@dataclass
class KMeansResult:
    centroids: np.ndarray    # (N, d)
    assignments: np.ndarray  # (P,)
    inertia: float
    degenerate: bool = False
    n_iter: int = 0
    # inertia after every assignment step of the winning restart
    history: list[float] = field(default_factory=list)
    restart_inertias: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray, p_sq: np.ndarray) -> np.ndarray:
    d = p_sq[:, None] - 2.0 * points @ centroids.T + np.sum(centroids * centroids, axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator,
                   p_sq: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """k-means++ seeding. Returns (centroids, degenerate).

    When fewer than k distinct points exist the remaining seeds duplicate the
    chosen ones and ``degenerate`` is True.
    """
    if p_sq is None:
        p_sq = np.sum(points * points, axis=1)
    P = len(points)
    chosen = [int(rng.integers(P))]
    closest = _sq_dists(points, points[chosen], p_sq)[:, 0]
    degenerate = False
    while len(chosen) < k:
        total = closest.sum()
        if not total > 0:
            degenerate = True
            break
        idx = int(rng.choice(P, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[[idx]], p_sq)[:, 0])
    centroids = points[chosen].copy()
    if degenerate:
        # duplicate the seed nearest to the centroid mass to fill the missing slots
        fill = np.resize(np.arange(len(chosen)), k - len(chosen))
        centroids = np.concatenate([centroids, centroids[fill]], axis=0)
    return centroids, degenerate


def empty_cluster_repair(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray,
                         dists: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """Reseed every empty cluster at the point farthest from its nearest centroid.

    ``dists`` is the (P, N) squared-distance matrix for ``centroids``.
    Returns updated (centroids, assignments, dists, repaired cluster ids);
    inputs are returned unchanged when no cluster is empty.
    """
    k = len(centroids)
    counts = np.bincount(assignments, minlength=k)
    empty = [int(j) for j in np.flatnonzero(counts == 0)]
    if not empty:
        return centroids, assignments, dists, []
    centroids = centroids.copy()
    dists = dists.copy()
    assignments = assignments.copy()
    p_sq = np.sum(points * points, axis=1)
    for j in empty:
        nearest = dists[np.arange(len(points)), assignments]
        far = int(np.argmax(nearest))
        centroids[j] = points[far]
        dists[:, j] = _sq_dists(points, centroids[j:j + 1], p_sq)[:, 0]
        assignments = np.argmin(dists, axis=1)
    return centroids, assignments, dists, empty


def _lloyd(points, centroids, cfg: KMeansConfig, p_sq):
    history = []
    assignments = np.zeros(len(points), dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, cfg.max_iters + 1):
        dists = _sq_dists(points, centroids, p_sq)
        assignments = np.argmin(dists, axis=1)
        centroids, assignments, dists, _ = empty_cluster_repair(points, centroids, assignments, dists)
        history.append(float(dists[np.arange(len(points)), assignments].sum()))
        new = np.stack([points[assignments == j].mean(axis=0) for j in range(len(centroids))])
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < cfg.tolerance:
            break
    dists = _sq_dists(points, centroids, p_sq)
    assignments = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(len(points)), assignments].sum())
    history.append(inertia)
    return centroids, assignments, inertia, n_iter, history


def kmeans(points, cfg: KMeansConfig) -> KMeansResult:
    """Best-of-``n_restarts`` Lloyd k-means, deterministic given ``cfg.seed``.

    Ties between restarts go to the lowest restart index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 1:
        raise ContractViolation(f"kmeans needs a (P, d) array with P >= 1, got {pts.shape}")
    k = cfg.n_clusters
    rng = np.random.default_rng(cfg.seed)
    p_sq = np.sum(pts * pts, axis=1)
    best: KMeansResult | None = None
    inertias = []
    for _ in range(cfg.n_restarts):
        init, degenerate = kmeans_pp_init(pts, k, rng, p_sq)
        if degenerate:
            dists = _sq_dists(pts, init, p_sq)
            assignments = np.argmin(dists, axis=1)
            inertia = float(dists[np.arange(len(pts)), assignments].sum())
            result = KMeansResult(init, assignments, inertia, True, 0, [inertia])
        else:
            cents, assignments, inertia, n_iter, history = _lloyd(pts, init, cfg, p_sq)
            result = KMeansResult(cents, assignments, inertia, False, n_iter, history)
        inertias.append(result.inertia)
        if best is None or result.inertia < best.inertia:
            best = result
    best.restart_inertias = inertias
    if best.degenerate:
        warnings.warn(f"kmeans: fewer than {k} distinct points; centroids duplicated", RuntimeWarning)
    return best
