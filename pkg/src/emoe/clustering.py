"""Partition d key vectors into N equal-size groups.

The clustering is a capacity-constrained k-means: k-means++ seeding,
then alternating (a) a greedy balanced assignment that walks all
(point, centroid) pairs in ascending squared-distance order and fills
clusters up to capacity d/N, and (b) the usual centroid-mean update.
The greedy assignment does not inherit Lloyd's monotonicity guarantee,
so an iteration whose balanced objective does not improve is rejected
and the search stops at the previous assignment; the reported
objective trace is therefore non-increasing by construction.

Tie-breaking is fully specified (lower point index, then lower cluster
index), which makes results a pure function of (keys, N, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstraintError, ShapeError
from .numerics import make_rng, require_finite


@dataclass
class Partition:
    assignment: np.ndarray  # (d,) expert id per key index
    n_experts: int

    def __post_init__(self) -> None:
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1:
            raise ConstraintError("assignment must be 1-D")
        d = self.assignment.shape[0]
        n = int(self.n_experts)
        self.n_experts = n
        if n < 1 or d < n:
            raise ValueError(f"need 1 <= n_experts <= d, got n_experts={n}, d={d}")
        if d % n != 0:
            raise ConstraintError(f"d={d} is not divisible by n_experts={n}")
        counts = np.bincount(self.assignment, minlength=n)
        if self.assignment.min() < 0 or self.assignment.max() >= n:
            raise ConstraintError("assignment contains expert ids out of range")
        if not np.all(counts == d // n):
            raise ConstraintError(f"unbalanced partition: cluster sizes {counts.tolist()}")

    @property
    def d(self) -> int:
        return int(self.assignment.shape[0])

    @property
    def group_size(self) -> int:
        return self.d // self.n_experts

    def members(self, expert: int) -> np.ndarray:
        """Key indices of one group, ascending."""
        if not 0 <= expert < self.n_experts:
            raise IndexError(f"expert id {expert} out of range")
        return np.flatnonzero(self.assignment == expert)


@dataclass
class ClusteringReport:
    iterations: int
    objective_per_iteration: list[float]
    converged: bool


def _as_points(keys: np.ndarray) -> np.ndarray:
    pts = np.asarray(keys, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"keys must be a (d, h) array, got shape {pts.shape}")
    require_finite(pts, "keys")
    return pts


def partition_objective(keys: np.ndarray, partition: Partition) -> float:
    """Sum over clusters of squared distances to the cluster mean."""
    pts = _as_points(keys)
    if pts.shape[0] != partition.d:
        raise ConstraintError(
            f"partition covers {partition.d} points but {pts.shape[0]} keys given"
        )
    total = 0.0
    for i in range(partition.n_experts):
        members = pts[partition.members(i)]
        centroid = members.mean(axis=0)
        total += float(((members - centroid) ** 2).sum())
    return total


def random_partition(d: int, n_experts: int, seed: int) -> Partition:
    """Uniformly random balanced partition from the seeded stream."""
    if d < 1 or n_experts < 1 or n_experts > d:
        raise ValueError(f"need 1 <= n_experts <= d, got n_experts={n_experts}, d={d}")
    if d % n_experts != 0:
        raise ConstraintError(f"d={d} is not divisible by n_experts={n_experts}")
    rng = make_rng(seed)
    ids = np.repeat(np.arange(n_experts, dtype=np.int64), d // n_experts)
    return Partition(assignment=ids[rng.permutation(d)], n_experts=n_experts)


def _kmeanspp_seed(pts: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centroid uniform, the rest sampled with
    probability proportional to squared distance to the nearest chosen one."""
    d = pts.shape[0]
    chosen = [int(rng.integers(d))]
    dist2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < n:
        total = dist2.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid: take the
            # lowest unchosen index
            remaining = sorted(set(range(d)) - set(chosen))
            chosen.append(remaining[0])
        else:
            idx = int(rng.choice(d, p=dist2 / total))
            chosen.append(idx)
        dist2 = np.minimum(dist2, ((pts - pts[chosen[-1]]) ** 2).sum(axis=1))
    return pts[chosen].copy()


def _greedy_balanced_assign(pts: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Assign each point to the nearest centroid with remaining capacity,
    visiting (point, centroid) pairs in ascending (distance, point index,
    cluster index) order."""
    d = pts.shape[0]
    n = centroids.shape[0]
    cap = d // n
    dist2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    point_idx, cluster_idx = np.divmod(np.arange(d * n), n)
    order = np.lexsort((cluster_idx, point_idx, dist2.ravel()))
    assignment = np.full(d, -1, dtype=np.int64)
    load = np.zeros(n, dtype=np.int64)
    assigned = 0
    for flat in order:
        p = point_idx[flat]
        c = cluster_idx[flat]
        if assignment[p] >= 0 or load[c] >= cap:
            continue
        assignment[p] = c
        load[c] += 1
        assigned += 1
        if assigned == d:
            break
    return assignment


def balanced_kmeans(
    keys: np.ndarray,
    n_experts: int,
    seed: int,
    max_iter: int = 100,
    restarts: int = 4,
) -> tuple[Partition, ClusteringReport]:
    """Cluster d keys into n_experts groups of exactly d/n_experts each.

    Runs the seeded procedure `restarts` times (the greedy assignment is
    sensitive to seeding) and keeps the run with the lowest final
    objective. Returns the partition and that run's report with the
    per-iteration objective (non-increasing) and a convergence flag.
    Deterministic in (keys, n_experts, seed).
    """
    pts = _as_points(keys)
    d = pts.shape[0]
    if n_experts < 1 or n_experts > d:
        raise ValueError(f"need 1 <= n_experts <= d, got n_experts={n_experts}, d={d}")
    if d % n_experts != 0:
        raise ConstraintError(f"d={d} is not divisible by n_experts={n_experts}")
    if max_iter < 1 or restarts < 1:
        raise ValueError("max_iter and restarts must be at least 1")

    rng = make_rng(seed)
    best: tuple[Partition, ClusteringReport] | None = None
    for _ in range(restarts):
        partition, report = _balanced_kmeans_once(pts, n_experts, rng, max_iter)
        if best is None or report.objective_per_iteration[-1] < best[1].objective_per_iteration[-1]:
            best = (partition, report)
    return best


def _balanced_kmeans_once(
    pts: np.ndarray,
    n_experts: int,
    rng: np.random.Generator,
    max_iter: int,
) -> tuple[Partition, ClusteringReport]:
    centroids = _kmeanspp_seed(pts, n_experts, rng)
    assignment = _greedy_balanced_assign(pts, centroids)
    partition = Partition(assignment=assignment, n_experts=n_experts)
    objective = partition_objective(pts, partition)
    objectives = [objective]
    converged = False

    iterations = 1
    while iterations < max_iter:
        centroids = np.stack(
            [pts[partition.members(i)].mean(axis=0) for i in range(n_experts)]
        )
        new_assignment = _greedy_balanced_assign(pts, centroids)
        if np.array_equal(new_assignment, partition.assignment):
            converged = True
            break
        candidate = Partition(assignment=new_assignment, n_experts=n_experts)
        new_objective = partition_objective(pts, candidate)
        if new_objective >= objective:
            # greedy assignment failed to improve; keep the better state
            converged = True
            break
        partition = candidate
        objective = new_objective
        objectives.append(new_objective)
        iterations += 1

    return partition, ClusteringReport(
        iterations=iterations,
        objective_per_iteration=objectives,
        converged=converged,
    )
