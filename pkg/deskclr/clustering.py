"""
Online Clustering Module for DeskCLR

Maintains pseudo-labels and centroids over the memory bank: a global k-means
for initialization (and for the offline relabeling mode), and a mini-batch
k-means step folded into every training iteration.

Distances are squared Euclidean against unnormalized centroids. Ties always go
to the lowest cluster index.
"""
import logging
from dataclasses import dataclass

import numpy as np

from deskclr.errors import ConfigurationError, IndexOutOfRangeError, InvalidStateError

logger = logging.getLogger(__name__)

DISTANCE_CHUNK = 1024


def _features_of(source):
    """Accept either a MemoryBank or a raw (N, D) matrix."""
    return np.asarray(getattr(source, "features", source))


def squared_distances(features, centroids):
    """
    Squared Euclidean distance from every feature to every centroid.

    Computed from explicit differences rather than the expanded dot-product
    form so that exact ties stay exact.

    Args:
        features (numpy.ndarray): (n, D) matrix
        centroids (numpy.ndarray): (k, D) matrix

    Returns:
        numpy.ndarray: (n, k) float64 distances
    """
    features = np.asarray(features, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    out = np.empty((features.shape[0], centroids.shape[0]))
    for start in range(0, features.shape[0], DISTANCE_CHUNK):
        diff = features[start:start + DISTANCE_CHUNK, None, :] - centroids[None, :, :]
        out[start:start + DISTANCE_CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _nearest(features, centroids, active):
    dists = squared_distances(features, centroids)
    dists[:, ~active] = np.inf
    labels = np.argmin(dists, axis=1)
    return labels, dists[np.arange(len(labels)), labels]


@dataclass
class ClusterState:
    """
    Pseudo-labels plus the running per-cluster statistics.

    ``assigned`` holds, for every instance, the feature it currently
    contributes to its cluster's sum, so a later move can be undone exactly.
    """

    labels: np.ndarray
    centroids: np.ndarray
    sums: np.ndarray
    counts: np.ndarray
    assigned: np.ndarray
    last_churn: float = 0.0

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def count(self):
        return self.labels.shape[0]

    @classmethod
    def from_labels(cls, labels, features, k):
        """
        Build consistent statistics from a labeling.

        Args:
            labels (numpy.ndarray): N cluster ids in [0, k)
            features (numpy.ndarray): (N, D) features the labels refer to
            k (int): Number of clusters

        Returns:
            ClusterState: New state; empty clusters get zero centroids
        """
        labels = np.asarray(labels, dtype=np.int64)
        features = np.asarray(features, dtype=np.float32)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise InvalidStateError(f"Labels must lie in [0, {k})")
        sums = np.zeros((k, features.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, features.astype(np.float64))
        counts = np.bincount(labels, minlength=k).astype(np.int64)
        centroids = np.zeros((k, features.shape[1]), dtype=np.float32)
        filled = counts > 0
        centroids[filled] = (sums[filled] / counts[filled, None]).astype(np.float32)
        return cls(labels=labels, centroids=centroids, sums=sums, counts=counts, assigned=features.copy())

    def copy(self):
        return ClusterState(
            labels=self.labels.copy(),
            centroids=self.centroids.copy(),
            sums=self.sums.copy(),
            counts=self.counts.copy(),
            assigned=self.assigned.copy(),
            last_churn=self.last_churn,
        )

    def _refresh_centroids(self, clusters):
        clusters = np.asarray(clusters, dtype=np.int64)
        filled = clusters[self.counts[clusters] > 0]
        empty = clusters[self.counts[clusters] == 0]
        self.centroids[filled] = (self.sums[filled] / self.counts[filled, None]).astype(np.float32)
        self.sums[empty] = 0.0


def kmeans_plus_plus(features, k, rng):
    """
    Choose k seed rows with k-means++ (D^2 weighting).

    When every remaining point coincides with a chosen seed, the next seed is
    drawn uniformly from the rows not chosen yet.

    Args:
        features (numpy.ndarray): (N, D) matrix
        k (int): Number of seeds
        rng (numpy.random.Generator): Seeded random stream

    Returns:
        numpy.ndarray: k distinct row indices
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(features, features[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(remaining[rng.integers(len(remaining))])
        chosen.append(nxt)
        closest = np.minimum(closest, squared_distances(features, features[[nxt]])[:, 0])
    return np.asarray(chosen, dtype=np.int64)


def lloyd(features, centroids, max_iters, tol=0.0):
    """
    Lloyd iterations from given centroids.

    Stops at an assignment fixpoint, when no centroid moves more than ``tol``,
    or after ``max_iters`` assignment steps. Clusters that lose every member
    keep their previous centroid.

    Returns:
        tuple: (labels, centroids) where centroids are the means of the labels
    """
    features = np.asarray(features, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64).copy()
    active = np.ones(centroids.shape[0], dtype=bool)
    labels = None
    for iteration in range(max_iters):
        new_labels, _ = _nearest(features, centroids, active)
        if labels is not None and np.array_equal(new_labels, labels):
            logger.debug(f"Lloyd reached an assignment fixpoint after {iteration} iterations")
            break
        labels = new_labels
        previous = centroids.copy()
        for j in range(centroids.shape[0]):
            members = labels == j
            if members.any():
                centroids[j] = features[members].mean(axis=0)
        if np.max(np.linalg.norm(centroids - previous, axis=1)) <= tol:
            break
    return labels, centroids


def global_kmeans(bank, k, max_iters=50, tol=1e-6, rng=None):
    """
    Cluster every stored feature from scratch.

    Args:
        bank (MemoryBank): Source of the features (a raw matrix also works)
        k (int): Number of clusters
        max_iters (int): Maximum Lloyd iterations
        tol (float): Centroid-shift stopping tolerance
        rng (numpy.random.Generator): Seeded random stream for seeding and repairs

    Returns:
        ClusterState: Consistent labels, centroids, sums and counts

    Raises:
        ConfigurationError: If k > N or max_iters < 1
    """
    features = _features_of(bank)
    n = features.shape[0]
    if not 1 <= k <= n:
        raise ConfigurationError(f"Cannot form {k} clusters from {n} instances")
    if max_iters < 1:
        raise ConfigurationError(f"k-means needs max_iters >= 1, got {max_iters}")
    rng = rng if rng is not None else np.random.default_rng(0)

    seeds = kmeans_plus_plus(features, k, rng)
    labels, _ = lloyd(features, features[seeds], max_iters, tol)
    state = ClusterState.from_labels(labels, features, k)
    handle_empty_clusters(state, bank, rng)
    logger.info(f"Global k-means over {n} instances: {k} clusters, largest has {state.counts.max()} members")
    return state


def assign_nearest_centroid(feature, state):
    """
    Find the nearest non-empty cluster for one feature.

    Args:
        feature (numpy.ndarray): D-vector
        state (ClusterState): Current clustering

    Returns:
        tuple: (label, squared distance)

    Raises:
        InvalidStateError: If every cluster is empty
    """
    active = state.counts > 0
    if not active.any():
        raise InvalidStateError("Cannot assign a feature: every cluster is empty")
    labels, dists = _nearest(np.asarray(feature).reshape(1, -1), state.centroids, active)
    return int(labels[0]), float(dists[0])


def minibatch_update(state, indices, bank, rng=None):
    """
    Fold a batch of freshly updated bank rows into the clustering.

    Each batch instance is reassigned to its nearest centroid using its current
    stored feature; sums and counts are moved incrementally (an instance that
    keeps its label contributes only the change in its feature); the affected
    centroids are recomputed and empty clusters repaired. The fraction of batch
    labels that changed is left in ``state.last_churn``.

    Args:
        state (ClusterState): Clustering to update in place
        indices (list): Unique instance ids of the batch
        bank (MemoryBank): Bank already momentum-updated for this batch
        rng (numpy.random.Generator): Random stream for empty-cluster repair

    Returns:
        ClusterState: The updated state
    """
    features = _features_of(bank)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= state.count):
        raise IndexOutOfRangeError(f"Instance index out of range [0, {state.count})")
    if indices.size == 0:
        state.last_churn = 0.0
        return state

    new_feats = features[indices].astype(np.float32)
    old_feats = state.assigned[indices]
    old_labels = state.labels[indices]
    active = state.counts > 0
    if not active.any():
        raise InvalidStateError("Cannot update clustering: every cluster is empty")
    new_labels, _ = _nearest(new_feats, state.centroids, active)

    moved = new_labels != old_labels
    stay = ~moved
    np.add.at(state.sums, old_labels[stay], new_feats[stay].astype(np.float64) - old_feats[stay].astype(np.float64))
    np.subtract.at(state.sums, old_labels[moved], old_feats[moved].astype(np.float64))
    np.add.at(state.sums, new_labels[moved], new_feats[moved].astype(np.float64))
    np.subtract.at(state.counts, old_labels[moved], 1)
    np.add.at(state.counts, new_labels[moved], 1)

    state.labels[indices] = new_labels
    state.assigned[indices] = new_feats
    state._refresh_centroids(np.union1d(old_labels, new_labels))
    state.last_churn = float(moved.mean())

    handle_empty_clusters(state, bank, rng if rng is not None else np.random.default_rng(0))
    return state


def handle_empty_clusters(state, bank, rng):
    """
    Re-seed every empty cluster from the currently largest one.

    A uniformly random member of the largest cluster is moved into the empty
    cluster and its stored feature becomes the new centroid.

    Args:
        state (ClusterState): Clustering to repair in place
        bank (MemoryBank): Source of the members' current features
        rng (numpy.random.Generator): Seeded random stream

    Returns:
        ClusterState: The repaired state
    """
    features = _features_of(bank)
    repaired = 0
    for j in np.flatnonzero(state.counts == 0):
        largest = int(np.argmax(state.counts))
        if state.counts[largest] < 2:
            raise InvalidStateError(f"Cannot repair empty cluster {j}: no cluster has two members")
        members = np.flatnonzero(state.labels == largest)
        member = int(members[rng.integers(len(members))])
        feature = features[member].astype(np.float32)

        state.sums[largest] -= state.assigned[member].astype(np.float64)
        state.counts[largest] -= 1
        state.labels[member] = j
        state.assigned[member] = feature
        state.sums[j] = feature.astype(np.float64)
        state.counts[j] = 1
        state.centroids[j] = feature
        state._refresh_centroids([largest])
        repaired += 1
    if repaired:
        logger.debug(f"Repaired {repaired} empty clusters")
    return state


def offline_relabel(bank, k, rng, max_iters=50, tol=1e-6):
    """Recompute all pseudo-labels with a fresh global k-means."""
    state = global_kmeans(bank, k, max_iters=max_iters, tol=tol, rng=rng)
    logger.debug("Offline relabel complete")
    return state
