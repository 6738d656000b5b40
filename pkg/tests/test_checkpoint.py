import os

import numpy as np
import pytest

from deskclr.checkpoint import load_checkpoint, save_checkpoint
from deskclr.clustering import ClusterState, global_kmeans
from deskclr.encoder import init_params
from deskclr.errors import FormatError
from deskclr.memory_bank import MemoryBank
from deskclr.trainer import check_cluster_consistency


@pytest.fixture
def run_state(rng):
    params = init_params([6, 16, 16, 8], rng)
    bank = MemoryBank(rng.standard_normal((40, 8)), 0.5)
    state = global_kmeans(bank, 5, rng=rng)
    return params, bank, state


class TestCheckpoint:
    def test_round_trip(self, tmp_path, run_state):
        params, bank, state = run_state
        path = str(tmp_path / "checkpoint.bin")
        save_checkpoint(path, params, bank, state)
        loaded_params, loaded_bank, loaded_state = load_checkpoint(path, omega=0.5)

        for a, b in zip(params.arrays(), loaded_params.arrays()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(loaded_bank.features, bank.features, atol=1e-7)
        np.testing.assert_array_equal(loaded_state.labels, state.labels)
        np.testing.assert_array_equal(loaded_state.counts, state.counts)
        np.testing.assert_allclose(loaded_state.centroids, state.centroids, atol=1e-6)
        check_cluster_consistency(loaded_state)
        assert not os.path.exists(path + ".tmp")

    def test_restore_after_bank_drift(self, tmp_path, run_state):
        params, bank, state = run_state
        bank.momentum_update(np.arange(10), np.eye(8)[np.arange(10) % 8])
        path = str(tmp_path / "checkpoint.bin")
        save_checkpoint(path, params, bank, state)
        _, loaded_bank, loaded_state = load_checkpoint(path)

        check_cluster_consistency(loaded_state)
        expected = ClusterState.from_labels(state.labels, loaded_bank.features, state.k)
        np.testing.assert_allclose(loaded_state.sums, expected.sums, atol=1e-9)
        np.testing.assert_array_equal(loaded_state.assigned, loaded_bank.features)

    def test_overwrite(self, tmp_path, run_state, rng):
        params, bank, state = run_state
        path = str(tmp_path / "checkpoint.bin")
        save_checkpoint(path, params, bank, state)
        bank.momentum_update([0], np.eye(8)[:1])
        save_checkpoint(path, params, bank, state)
        _, loaded_bank, _ = load_checkpoint(path)
        np.testing.assert_allclose(loaded_bank.features[0], bank.features[0], atol=1e-7)

    def test_bad_magic(self, tmp_path, run_state):
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(str(path), *run_state)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    @pytest.mark.parametrize("keep", [3, 20, 500, -1])
    def test_truncated(self, tmp_path, run_state, keep):
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(str(path), *run_state)
        raw = path.read_bytes()
        path.write_bytes(raw[:keep])
        with pytest.raises(FormatError):
            load_checkpoint(str(path))
