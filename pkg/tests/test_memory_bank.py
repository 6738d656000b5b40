import numpy as np
import pytest

from deskclr.errors import (
    ConfigurationError,
    DegenerateInputError,
    IndexOutOfRangeError,
    InsufficientPopulationError,
)
from deskclr.memory_bank import MemoryBank, init_bank, normalize_rows


class TestInit:
    def test_rows_are_normalized(self):
        bank = init_bank(np.array([[3.0, 4.0]]), 0.5)
        assert bank.features.dtype == np.float32
        np.testing.assert_allclose(bank.features[0], [0.6, 0.8], atol=1e-6)

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            MemoryBank(np.array([[1.0, 0.0], [0.0, 0.0]]), 0.5)

    @pytest.mark.parametrize("omega", [0.0, -0.1, 1.3])
    def test_omega_range(self, omega):
        with pytest.raises(ConfigurationError):
            MemoryBank(np.eye(2), omega)

    def test_normalize_rows_keeps_dtype(self):
        out = normalize_rows(np.array([[0.0, 2.0]], dtype=np.float32))
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, [[0.0, 1.0]])


class TestMomentumUpdate:
    def test_omega_one_replaces_row(self):
        bank = MemoryBank(np.array([[1.0, 0.0], [0.0, 1.0]]), 1.0)
        bank.momentum_update([0], np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(bank.features[0], [0.0, 1.0])

    def test_symmetric_blend_lands_on_diagonal(self):
        bank = MemoryBank(np.array([[1.0, 0.0], [0.0, 1.0]]), 0.5)
        bank.momentum_update([0], np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(bank.features[0], [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-6)

    def test_blend_matches_direct_evaluation(self):
        bank = MemoryBank(np.array([[0.6, 0.8], [1.0, 0.0]]), 0.5)
        bank.momentum_update([0], np.array([[1.0, 0.0]]))
        raw = 0.5 * np.array([0.6, 0.8]) + 0.5 * np.array([1.0, 0.0])
        np.testing.assert_allclose(bank.features[0], raw / np.linalg.norm(raw), atol=1e-6)

    def test_other_rows_untouched(self, rng):
        features = rng.standard_normal((6, 4))
        bank = MemoryBank(features, 0.5)
        before = bank.features.copy()
        bank.momentum_update([1, 4], normalize_rows(rng.standard_normal((2, 4))))
        untouched = [0, 2, 3, 5]
        np.testing.assert_array_equal(bank.features[untouched], before[untouched])
        np.testing.assert_allclose(np.linalg.norm(bank.features, axis=1), 1.0, atol=1e-6)

    def test_opposite_vectors_collapse(self):
        bank = MemoryBank(np.array([[1.0, 0.0], [0.0, 1.0]]), 0.5)
        with pytest.raises(DegenerateInputError):
            bank.momentum_update([0], np.array([[-1.0, 0.0]]))

    def test_index_out_of_range(self):
        bank = MemoryBank(np.eye(3), 0.5)
        with pytest.raises(IndexOutOfRangeError):
            bank.momentum_update([3], np.array([[1.0, 0.0, 0.0]]))


class TestReadRows:
    def test_round_trip_after_replacement(self):
        bank = MemoryBank(np.eye(3), 1.0)
        bank.momentum_update([2], np.array([[0.0, 1.0, 0.0]]))
        np.testing.assert_array_equal(bank.read_rows([2]), [[0.0, 1.0, 0.0]])

    def test_empty_query(self):
        bank = MemoryBank(np.eye(3), 0.5)
        assert bank.read_rows([]).shape == (0, 3)

    def test_duplicates_allowed(self):
        bank = MemoryBank(np.eye(3), 0.5)
        rows = bank.read_rows([0, 0])
        np.testing.assert_array_equal(rows[0], rows[1])

    def test_returns_copy(self):
        bank = MemoryBank(np.eye(2), 0.5)
        rows = bank.read_rows([0])
        rows[0, 0] = 5.0
        assert bank.features[0, 0] == 1.0


class TestIndexNegatives:
    def test_only_candidate(self, rng):
        bank = MemoryBank(np.eye(2), 0.5)
        np.testing.assert_array_equal(bank.sample_index_negatives(0, 1, rng), [1])

    def test_exhaustive_draw(self, rng):
        bank = MemoryBank(np.eye(5), 0.5)
        draws = bank.sample_index_negatives(2, 4, rng)
        assert sorted(draws.tolist()) == [0, 1, 3, 4]

    def test_too_many(self, rng):
        bank = MemoryBank(np.eye(3), 0.5)
        with pytest.raises(InsufficientPopulationError):
            bank.sample_index_negatives(0, 3, rng)

    def test_uniform_frequencies(self, rng):
        bank = MemoryBank(np.eye(11), 0.5)
        draws = 20000
        counts = np.zeros(11)
        for _ in range(draws):
            counts[bank.sample_index_negatives(5, 1, rng)[0]] += 1
        assert counts[5] == 0
        freq = np.delete(counts, 5) / draws
        sigma = np.sqrt(0.1 * 0.9 / draws)
        assert np.all(np.abs(freq - 0.1) < 4 * sigma)
