"""
Memory Bank Module for DeskCLR

Stores one running-average embedding per training instance and applies the
momentum update after every iteration.
"""
import logging
import numpy as np

from deskclr.errors import (
    ConfigurationError,
    DegenerateInputError,
    IndexOutOfRangeError,
    InsufficientPopulationError,
)

logger = logging.getLogger(__name__)

# Raw momentum combinations shorter than this cannot be renormalized.
MIN_UPDATE_NORM = 1e-12


def normalize_rows(matrix, dtype=None):
    """
    L2-normalize every row of a matrix.

    Args:
        matrix (numpy.ndarray): (n, D) matrix
        dtype (numpy.dtype): Output dtype, defaults to the input dtype

    Returns:
        numpy.ndarray: Row-normalized copy

    Raises:
        DegenerateInputError: If any row has zero length
    """
    matrix = np.asarray(matrix)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms[:, 0] == 0)
        raise DegenerateInputError(f"Cannot normalize zero-norm rows: {bad[:10].tolist()}")
    out = matrix / norms
    return out.astype(dtype or matrix.dtype, copy=False)


class MemoryBank:
    """
    Per-instance L2-normalized feature store with a momentum update.

    Rows are float32 and always unit length. The instance count is fixed at
    construction.
    """

    def __init__(self, features, omega):
        """
        Initialize the bank from a first pass over the training set.

        Args:
            features (numpy.ndarray): (N, D) matrix with nonzero rows
            omega (float): Momentum coefficient in (0, 1]

        Raises:
            ConfigurationError: If omega is out of range
            DegenerateInputError: If any row has zero length
        """
        if not 0.0 < omega <= 1.0:
            raise ConfigurationError(f"Memory bank omega must lie in (0, 1], got {omega}")
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ConfigurationError(f"Memory bank expects an (N, D) matrix, got shape {features.shape}")
        self.features = normalize_rows(features, dtype=np.float32)
        self.omega = float(omega)
        logger.debug(f"Memory bank initialized with {self.count} rows of dimension {self.dim}, omega={omega}")

    @property
    def count(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def _check_indices(self, indices):
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.size and (indices.min() < 0 or indices.max() >= self.count):
            raise IndexOutOfRangeError(
                f"Instance index out of range [0, {self.count}): {indices[(indices < 0) | (indices >= self.count)][:10].tolist()}"
            )
        return indices

    def momentum_update(self, indices, new_features):
        """
        Blend fresh embeddings into the stored rows and renormalize.

        v_i <- normalize((1 - omega) * v_i + omega * new_i) for every i in ``indices``;
        all other rows are left untouched.

        Args:
            indices (list): Unique instance ids of the batch
            new_features (numpy.ndarray): (batch, D) unit-norm embeddings

        Returns:
            MemoryBank: self, for chaining

        Raises:
            IndexOutOfRangeError: If an index is >= N
            DegenerateInputError: If a blended row collapses to (near) zero
        """
        indices = self._check_indices(indices)
        new_features = np.asarray(new_features, dtype=np.float64).reshape(len(indices), self.dim)
        if indices.size == 0:
            return self

        stored = self.features[indices].astype(np.float64)
        if self.omega == 1.0:
            raw = new_features
        else:
            raw = (1.0 - self.omega) * stored + self.omega * new_features
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms < MIN_UPDATE_NORM):
            bad = indices[norms[:, 0] < MIN_UPDATE_NORM]
            raise DegenerateInputError(f"Momentum update collapsed rows {bad[:10].tolist()} to zero")
        self.features[indices] = (raw / norms).astype(np.float32)
        return self

    def read_rows(self, indices):
        """
        Read stored embeddings.

        Args:
            indices (list): Instance ids; duplicates allowed

        Returns:
            numpy.ndarray: (len(indices), D) copy of the stored rows
        """
        indices = self._check_indices(indices)
        return self.features[indices].copy()

    def sample_index_negatives(self, anchor, K, rng):
        """
        Draw K distinct instance ids other than the anchor, uniformly.

        Args:
            anchor (int): Instance id to exclude
            K (int): Number of negatives
            rng (numpy.random.Generator): Seeded random stream

        Returns:
            numpy.ndarray: K instance ids

        Raises:
            InsufficientPopulationError: If K > N - 1
        """
        anchor = int(self._check_indices([anchor])[0])
        if K > self.count - 1:
            raise InsufficientPopulationError(
                f"Cannot draw {K} index negatives from {self.count - 1} candidates"
            )
        draws = rng.choice(self.count - 1, size=K, replace=False)
        # Skip over the anchor by shifting the upper part of the range.
        return draws + (draws >= anchor)


def init_bank(initial_features, omega):
    """Build a memory bank from the first full forward pass."""
    return MemoryBank(initial_features, omega)
