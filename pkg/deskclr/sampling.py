"""
Contrastive Sampling Module for DeskCLR

Builds inter-image positives and negatives from the pseudo-labels. Candidates
are ranked by cosine similarity of their stored bank features to the anchor's
stored feature; ranking ties go to the lowest instance id.
"""
import math
import logging

import numpy as np

from deskclr.configuration import SamplingConfig
from deskclr.errors import ConfigurationError, IndexOutOfRangeError, NoNegativesError

logger = logging.getLogger(__name__)

NEAREST = "nearest"
FARTHEST = "farthest"


def candidate_split(anchor, state):
    """
    Split the other instances by whether they share the anchor's pseudo-label.

    Args:
        anchor (int): Instance id
        state (ClusterState): Current clustering

    Returns:
        tuple: (positives S_p, negatives S_n) as ascending id arrays
    """
    labels = state.labels
    if not 0 <= anchor < labels.shape[0]:
        raise IndexOutOfRangeError(f"Anchor {anchor} out of range [0, {labels.shape[0]})")
    same = labels == labels[anchor]
    negatives = np.flatnonzero(~same)
    same[anchor] = False
    return np.flatnonzero(same), negatives


def sample_positive_inter(anchor, state, bank, rng):
    """
    Draw one instance sharing the anchor's pseudo-label.

    A singleton cluster has no such instance; the anchor itself is returned so
    the inter-image positive falls back to the anchor's own stored feature.

    Returns:
        int: Instance id
    """
    positives, _ = candidate_split(anchor, state)
    if positives.size == 0:
        logger.debug(f"Anchor {anchor} sits in a singleton cluster, using its own bank feature")
        return int(anchor)
    return int(positives[rng.integers(positives.size)])


def _cosine_to_anchor(anchor, bank, candidates, similarities=None):
    if similarities is not None:
        return np.asarray(similarities, dtype=np.float64)[candidates]
    features = bank.features
    return features[candidates].astype(np.float64) @ features[anchor].astype(np.float64)


def anchor_similarities(anchors, bank):
    """
    Cosine similarity of each anchor's stored feature to every bank row.

    Args:
        anchors (numpy.ndarray): Instance ids of the batch
        bank (MemoryBank): Stored features

    Returns:
        numpy.ndarray: (len(anchors), N) float64 matrix
    """
    features = bank.features.astype(np.float64)
    return features[np.asarray(anchors, dtype=np.int64)] @ features.T


def _sort_keys(sims, mode):
    return -sims if mode == NEAREST else sims


def _rank(anchor, bank, candidates, mode, similarities=None):
    keys = _sort_keys(_cosine_to_anchor(anchor, bank, candidates, similarities), mode)
    # Candidates are in ascending id order, so a stable sort keeps the lowest id first on ties.
    order = np.argsort(keys, kind="stable")
    return candidates[order]


def _top(anchor, bank, candidates, mode, m, similarities=None):
    """The first m entries of ``_rank`` without sorting the whole candidate set."""
    if m >= candidates.size:
        return _rank(anchor, bank, candidates, mode, similarities)
    keys = _sort_keys(_cosine_to_anchor(anchor, bank, candidates, similarities), mode)
    kth = np.partition(keys, m - 1)[m - 1]
    below = np.flatnonzero(keys < kth)
    tied = np.flatnonzero(keys == kth)[:m - below.size]
    chosen = np.concatenate([below, tied])
    return candidates[chosen[np.lexsort((chosen, keys[chosen]))]]


def pool_size(n, pool_fraction):
    """Pool size ``max(1, ceil(pool_fraction * n))``."""
    return max(1, math.ceil(pool_fraction * n))


def neighbor_pool(anchor, bank, negatives, mode, pool_fraction, similarities=None):
    """
    Take the top fraction of negative candidates by cosine similarity.

    Args:
        anchor (int): Instance id
        bank (MemoryBank): Stored features
        negatives (numpy.ndarray): Candidate ids S_n in ascending order
        mode (str): 'nearest' (most similar first) or 'farthest' (least similar first)
        pool_fraction (float): Fraction of S_n to keep, rounded up
        similarities (numpy.ndarray): Optional precomputed row of the anchor's
            similarity to every instance (see ``anchor_similarities``)

    Returns:
        numpy.ndarray: Pool ids in rank order

    Raises:
        NoNegativesError: If S_n is empty
    """
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.size == 0:
        raise NoNegativesError(f"Anchor {anchor} has no negative candidates")
    if mode not in (NEAREST, FARTHEST):
        raise ConfigurationError(f"Unknown neighbor pool mode '{mode}'")
    return _top(anchor, bank, negatives, mode, pool_size(negatives.size, pool_fraction), similarities)


def _draw(population, K, rng):
    """K uniform draws, without replacement whenever the population allows it."""
    return rng.choice(population, size=K, replace=population.size < K)


def sample_negatives(anchor, bank, state, cfg: SamplingConfig, rng, similarities=None):
    """
    Draw K inter-image negatives for an anchor.

    hard:       the K most similar candidates (deterministic)
    semi_hard:  K uniform draws from the nearest-neighbor pool
    random:     K uniform draws from all candidates
    semi_easy:  K uniform draws from the farthest-neighbor pool

    When K exceeds the population the hard ranking repeats cyclically and the
    random draws switch to sampling with replacement. ``similarities`` is an
    optional precomputed row of the anchor's similarity to every instance.

    Returns:
        numpy.ndarray: K instance ids

    Raises:
        NoNegativesError: If every other instance shares the anchor's label
    """
    _, negatives = candidate_split(anchor, state)
    if negatives.size == 0:
        raise NoNegativesError(f"Anchor {anchor} has no negative candidates")

    if cfg.strategy == "hard":
        return np.resize(_rank(anchor, bank, negatives, NEAREST, similarities), cfg.K)
    if cfg.strategy == "semi_hard":
        pool = neighbor_pool(anchor, bank, negatives, NEAREST, cfg.pool_fraction, similarities)
        return _draw(pool, cfg.K, rng)
    if cfg.strategy == "random":
        return _draw(negatives, cfg.K, rng)
    if cfg.strategy == "semi_easy":
        pool = neighbor_pool(anchor, bank, negatives, FARTHEST, cfg.pool_fraction, similarities)
        return _draw(pool, cfg.K, rng)
    raise ConfigurationError(f"Unknown sampling strategy '{cfg.strategy}'")
