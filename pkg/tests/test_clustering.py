import numpy as np
import pytest

from deskclr.clustering import (
    ClusterState,
    assign_nearest_centroid,
    global_kmeans,
    handle_empty_clusters,
    kmeans_plus_plus,
    lloyd,
    minibatch_update,
    offline_relabel,
    squared_distances,
)
from deskclr.errors import ConfigurationError, IndexOutOfRangeError, InvalidStateError
from deskclr.memory_bank import MemoryBank, normalize_rows
from deskclr.trainer import check_cluster_consistency


def planted(rng, clusters, per_cluster, dim, spread):
    centers = rng.standard_normal((clusters, dim)) * 10.0
    labels = np.repeat(np.arange(clusters), per_cluster)
    return centers[labels] + spread * rng.standard_normal((labels.size, dim)), labels


def brute_force_lloyd(features, centroids):
    centroids = centroids.copy()
    labels = None
    while True:
        new_labels = np.array([
            min(range(len(centroids)), key=lambda j: (float(np.sum((x - centroids[j]) ** 2)), j))
            for x in features
        ])
        if labels is not None and np.array_equal(new_labels, labels):
            return labels
        labels = new_labels
        for j in range(len(centroids)):
            if np.any(labels == j):
                centroids[j] = features[labels == j].mean(axis=0)


def manual_state(centroids):
    centroids = np.asarray(centroids, dtype=np.float32)
    k = centroids.shape[0]
    return ClusterState(
        labels=np.arange(k),
        centroids=centroids,
        sums=centroids.astype(np.float64),
        counts=np.ones(k, dtype=np.int64),
        assigned=centroids.copy(),
    )


class TestGlobalKMeans:
    def test_separated_pairs(self):
        features = np.array([[1.0, 0.0], [0.99, 0.01], [-1.0, 0.0], [-0.99, -0.01]])
        state = global_kmeans(features, 2, rng=np.random.default_rng(0))
        assert state.labels[0] == state.labels[1]
        assert state.labels[2] == state.labels[3]
        assert state.labels[0] != state.labels[2]

    def test_k_equals_n(self, rng):
        features = rng.standard_normal((5, 3))
        state = global_kmeans(features, 5, rng=rng)
        assert sorted(state.labels.tolist()) == [0, 1, 2, 3, 4]
        np.testing.assert_allclose(state.centroids[state.labels], features, atol=1e-6)

    def test_k_too_large(self, rng):
        with pytest.raises(ConfigurationError):
            global_kmeans(np.eye(3), 4, rng=rng)

    def test_matches_brute_force_lloyd(self, rng):
        features, _ = planted(rng, 3, 10, 4, 1.0)
        seeds = kmeans_plus_plus(features, 3, np.random.default_rng(3))
        labels, centroids = lloyd(features, features[seeds], max_iters=100, tol=0.0)
        np.testing.assert_array_equal(labels, brute_force_lloyd(features, features[seeds]))
        for j in range(3):
            np.testing.assert_allclose(centroids[j], features[labels == j].mean(axis=0))

    def test_repeatable(self, rng):
        features, _ = planted(rng, 4, 20, 5, 2.0)
        a = global_kmeans(features, 6, rng=np.random.default_rng(11))
        b = global_kmeans(features, 6, rng=np.random.default_rng(11))
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_offline_relabel_is_consistent(self, rng):
        bank = MemoryBank(rng.standard_normal((60, 4)), 0.5)
        state = offline_relabel(bank, 5, np.random.default_rng(1))
        assert state.counts.sum() == 60
        assert np.all(state.counts > 0)
        check_cluster_consistency(state)

    def test_kmeans_plus_plus_distinct_seeds(self, rng):
        features = np.vstack([np.zeros((5, 2)), np.ones((1, 2))])
        seeds = kmeans_plus_plus(features, 3, rng)
        assert len(set(seeds.tolist())) == 3


class TestAssignNearest:
    def test_exact_hit(self):
        state = manual_state([[0.0, 0.0], [1.0, 1.0], [3.0, -2.0], [5.0, 5.0]])
        assert assign_nearest_centroid(np.array([3.0, -2.0]), state) == (2, 0.0)

    def test_tie_goes_to_lowest_index(self):
        state = manual_state([[10.0, 10.0], [1.0, 0.0], [5.0, 5.0], [-1.0, 0.0]])
        label, dist = assign_nearest_centroid(np.array([0.0, 0.0]), state)
        assert label == 1
        assert dist == 1.0

    def test_matches_exhaustive_scan(self, rng):
        centroids = rng.standard_normal((8, 5))
        state = manual_state(centroids)
        c64 = state.centroids.astype(np.float64)
        for query in rng.standard_normal((1000, 5)):
            expected = int(np.argmin(np.sum((query - c64) ** 2, axis=1)))
            assert assign_nearest_centroid(query, state)[0] == expected

    def test_empty_clusters_skipped(self):
        state = manual_state([[0.0, 0.0], [1.0, 1.0]])
        state.counts[0] = 0
        assert assign_nearest_centroid(np.array([0.0, 0.0]), state)[0] == 1

    def test_all_empty(self):
        state = manual_state([[0.0, 0.0]])
        state.counts[:] = 0
        with pytest.raises(InvalidStateError):
            assign_nearest_centroid(np.array([0.0, 0.0]), state)


class TestMinibatchUpdate:
    def test_fixpoint_leaves_state_unchanged(self, rng):
        directions = np.eye(4)[:3]
        labels = np.repeat(np.arange(3), 10)
        bank = MemoryBank(directions[labels] + 0.01 * rng.standard_normal((30, 4)), 0.5)
        state = ClusterState.from_labels(labels, bank.features, 3)
        before = state.copy()
        minibatch_update(state, [0, 5, 12, 29], bank, rng)
        np.testing.assert_array_equal(state.labels, before.labels)
        np.testing.assert_array_equal(state.counts, before.counts)
        np.testing.assert_array_equal(state.sums, before.sums)
        np.testing.assert_array_equal(state.centroids, before.centroids)
        assert state.last_churn == 0.0

    def test_matches_full_recompute(self, rng):
        bank = MemoryBank(rng.standard_normal((200, 8)), 0.5)
        state = global_kmeans(bank, 10, rng=np.random.default_rng(1))
        for _ in range(50):
            indices = rng.choice(200, size=20, replace=False)
            bank.momentum_update(indices, normalize_rows(rng.standard_normal((20, 8))))
            minibatch_update(state, indices, bank, rng)
        fresh = ClusterState.from_labels(state.labels, bank.features, 10)
        np.testing.assert_array_equal(fresh.counts, state.counts)
        np.testing.assert_allclose(fresh.sums, state.sums, atol=1e-3)
        np.testing.assert_allclose(fresh.centroids, state.centroids, atol=1e-3)

    def test_churn_is_fraction_of_batch(self, rng):
        features = np.array([[1.0, 0.0], [1.0, 0.1], [-1.0, 0.0], [-1.0, 0.1]])
        bank = MemoryBank(features, 1.0)
        state = ClusterState.from_labels([0, 0, 1, 1], bank.features, 2)
        # Move instance 1 next to cluster 1; keep instance 0 where it is.
        bank.momentum_update([1], normalize_rows(np.array([[-1.0, 0.05]])))
        minibatch_update(state, [0, 1], bank, rng)
        assert state.labels.tolist() == [0, 1, 1, 1]
        assert state.last_churn == 0.5
        assert state.counts.tolist() == [1, 3]

    def test_index_out_of_range(self, rng):
        bank = MemoryBank(np.eye(3), 0.5)
        state = ClusterState.from_labels([0, 1, 2], bank.features, 3)
        with pytest.raises(IndexOutOfRangeError):
            minibatch_update(state, [3], bank, rng)


class TestEmptyClusters:
    def test_no_empty_is_noop(self, rng):
        features = rng.standard_normal((6, 2))
        state = ClusterState.from_labels([0, 0, 1, 1, 2, 2], features, 3)
        before = state.copy()
        handle_empty_clusters(state, features, rng)
        np.testing.assert_array_equal(state.labels, before.labels)
        np.testing.assert_array_equal(state.counts, before.counts)

    def test_steals_from_largest(self, rng):
        features = rng.standard_normal((5, 2))
        state = ClusterState.from_labels([0, 0, 0, 1, 1], features, 3)
        handle_empty_clusters(state, features, rng)
        assert state.counts.tolist() == [2, 2, 1]
        moved = int(np.flatnonzero(state.labels == 2)[0])
        assert moved in (0, 1, 2)
        np.testing.assert_allclose(state.centroids[2], features[moved], atol=1e-6)
        check_cluster_consistency(state)

    def test_stress_keeps_counts(self, rng):
        bank = MemoryBank(rng.standard_normal((100, 6)), 0.9)
        state = global_kmeans(bank, 20, rng=np.random.default_rng(5))
        for _ in range(500):
            indices = rng.choice(100, size=10, replace=False)
            bank.momentum_update(indices, normalize_rows(rng.standard_normal((10, 6))))
            minibatch_update(state, indices, bank, rng)
            assert state.counts.sum() == 100
            assert np.all(state.counts > 0)
        check_cluster_consistency(state)


def test_squared_distances_chunking(rng):
    features = rng.standard_normal((2500, 3))
    centroids = rng.standard_normal((4, 3))
    expected = ((features[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    np.testing.assert_allclose(squared_distances(features, centroids), expected)
