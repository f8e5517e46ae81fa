from itertools import combinations

import numpy as np
import pytest

from emoe import Partition, balanced_kmeans, partition_objective, random_partition
from emoe.errors import ConstraintError
from emoe.numerics import make_rng


def enumerate_balanced_partitions(d, n):
    """All partitions of range(d) into n unlabeled groups of size d//n.
    Canonical form: the lowest unplaced index anchors each new group."""
    m = d // n

    def rec(remaining):
        if not remaining:
            yield []
            return
        first, rest = remaining[0], remaining[1:]
        for others in combinations(rest, m - 1):
            group = (first,) + others
            left = [i for i in rest if i not in others]
            for tail in rec(left):
                yield [group] + tail

    yield from rec(list(range(d)))


def groups_to_partition(groups):
    d = sum(len(g) for g in groups)
    assignment = np.empty(d, dtype=np.int64)
    for i, group in enumerate(groups):
        for j in group:
            assignment[j] = i
    return Partition(assignment=assignment, n_experts=len(groups))


def brute_force_optimum(points, n):
    """Exhaustive search over balanced partitions; returns (objective, groups)."""
    best = (np.inf, None)
    for groups in enumerate_balanced_partitions(len(points), n):
        obj = partition_objective(points, groups_to_partition(groups))
        if obj < best[0]:
            best = (obj, groups)
    return best


def canonical_groups(partition):
    groups = [tuple(partition.members(i).tolist()) for i in range(partition.n_experts)]
    return sorted(groups)


WELL_SEPARATED = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])


class TestObjective:
    def test_singletons_are_zero(self):
        p = Partition(assignment=np.arange(4), n_experts=4)
        assert partition_objective(WELL_SEPARATED, p) == 0.0

    def test_hand_value_good_split(self):
        p = groups_to_partition([(0, 1), (2, 3)])
        assert partition_objective(WELL_SEPARATED, p) == pytest.approx(0.01, abs=1e-12)

    def test_hand_value_bad_split(self):
        # each mixed pair spans the diagonal (5, 5): ||diff||^2 / 2 = 25 per pair
        p = groups_to_partition([(0, 2), (1, 3)])
        assert partition_objective(WELL_SEPARATED, p) == pytest.approx(50.0, abs=1e-9)

    def test_wrong_length_rejected(self):
        p = Partition(assignment=np.array([0, 0, 1, 1]), n_experts=2)
        with pytest.raises(ConstraintError):
            partition_objective(np.zeros((6, 2)), p)


class TestBalancedKmeans:
    def test_separated_pairs_recovered(self):
        partition, report = balanced_kmeans(WELL_SEPARATED, 2, seed=0)
        assert canonical_groups(partition) == [(0, 1), (2, 3)]
        assert report.objective_per_iteration[-1] == pytest.approx(0.01)

    def test_single_cluster_objective_is_total_variance(self, rng):
        pts = rng.normal(size=(6, 3))
        partition, report = balanced_kmeans(pts, 1, seed=3)
        assert partition.assignment.tolist() == [0] * 6
        centered = pts - pts.mean(axis=0)
        assert report.objective_per_iteration[-1] == pytest.approx((centered**2).sum())

    def test_singleton_clusters(self, rng):
        pts = rng.normal(size=(5, 2))
        partition, report = balanced_kmeans(pts, 5, seed=1)
        assert sorted(partition.assignment.tolist()) == [0, 1, 2, 3, 4]
        assert report.objective_per_iteration[-1] == 0.0

    def test_balance_holds_on_random_instances(self):
        rng = make_rng(5150)
        for trial in range(200):
            n = int(rng.choice([1, 2, 3, 4, 6]))
            m = int(rng.integers(1, 5))
            d = n * m
            h = int(rng.integers(1, 4))
            pts = rng.normal(size=(d, h))
            partition, report = balanced_kmeans(pts, n, seed=trial)
            counts = np.bincount(partition.assignment, minlength=n)
            assert np.all(counts == m)
            diffs = np.diff(report.objective_per_iteration)
            assert np.all(diffs <= 0)

    def test_determinism(self, rng):
        pts = rng.normal(size=(12, 3))
        p1, _ = balanced_kmeans(pts, 3, seed=42)
        p2, _ = balanced_kmeans(pts, 3, seed=42)
        assert np.array_equal(p1.assignment, p2.assignment)

    def test_near_optimal_on_tiny_instances(self):
        rng = make_rng(777)
        worse = 0
        trials = 30
        for trial in range(trials):
            n = int(rng.choice([2, 3]))
            m = int(rng.integers(2, 5))
            d = n * m
            if d > 12:
                continue
            pts = rng.normal(size=(d, int(rng.integers(1, 4))))
            partition, _ = balanced_kmeans(pts, n, seed=trial)
            got = partition_objective(pts, partition)
            best, _ = brute_force_optimum(pts, n)
            if got > 1.5 * best + 1e-12:
                worse += 1
                print(f"trial {trial}: objective {got:.4f} vs optimum {best:.4f}")
        # heuristic bound: a few hard instances may exceed it, most must be close
        assert worse <= trials // 10

    def test_duplicate_points_allowed(self):
        pts = np.zeros((6, 2))
        partition, _ = balanced_kmeans(pts, 3, seed=0)
        assert np.all(np.bincount(partition.assignment) == 2)

    def test_constraint_errors(self, rng):
        pts = rng.normal(size=(5, 2))
        with pytest.raises(ConstraintError):
            balanced_kmeans(pts, 2, seed=0)  # 5 % 2 != 0
        with pytest.raises(ValueError):
            balanced_kmeans(pts, 6, seed=0)  # N > d
        with pytest.raises(ValueError):
            balanced_kmeans(pts, 1, seed=0, max_iter=0)


class TestRandomPartition:
    def test_balance(self):
        p = random_partition(4, 2, seed=9)
        assert np.all(np.bincount(p.assignment, minlength=2) == 2)

    def test_determinism(self):
        a = random_partition(64, 8, seed=5)
        b = random_partition(64, 8, seed=5)
        assert np.array_equal(a.assignment, b.assignment)

    def test_all_singletons(self):
        p = random_partition(64, 64, seed=2)
        assert sorted(p.assignment.tolist()) == list(range(64))

    def test_unbalanced_rejected(self):
        with pytest.raises(ConstraintError):
            random_partition(5, 2, seed=0)


class TestPartitionType:
    def test_rejects_unbalanced_assignment(self):
        with pytest.raises(ConstraintError):
            Partition(assignment=np.array([0, 0, 0, 1]), n_experts=2)

    def test_rejects_out_of_range_ids(self):
        with pytest.raises(ConstraintError):
            Partition(assignment=np.array([0, 2]), n_experts=2)

    def test_members_ascending(self):
        p = Partition(assignment=np.array([1, 0, 1, 0]), n_experts=2)
        assert p.members(0).tolist() == [1, 3]
        assert p.members(1).tolist() == [0, 2]
