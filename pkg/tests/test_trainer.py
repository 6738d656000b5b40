import logging
from dataclasses import replace

import numpy as np
import pytest

from deskclr.configuration import LossConfig, SamplingConfig
from deskclr.encoder import init_params
from deskclr.errors import ConfigurationError, InsufficientPopulationError, InvalidStateError, NumericError
from deskclr.trainer import OptimizerState, Trainer, check_cluster_consistency, lr_at, sgd_step, train


def metrics_lines(result):
    return [record.to_json() for record in result.metrics]


class TestLearningRate:
    def test_endpoints_exact(self):
        assert lr_at(0, 100, 0.03, 3e-5) == 0.03
        assert lr_at(100, 100, 0.03, 3e-5) == 3e-5

    def test_midpoint(self):
        assert lr_at(50, 100, 0.03, 0.01) == pytest.approx(0.02, abs=1e-15)

    def test_monotone(self):
        rates = [lr_at(t, 40, 0.1, 0.001) for t in range(41)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(101, 100, 0.03, 0.0)


class TestSGD:
    def setup_params(self, rng):
        params = init_params([3, 4, 4, 2], rng, dtype=np.float64)
        grads = init_params([3, 4, 4, 2], np.random.default_rng(99), dtype=np.float64)
        return params, grads

    def test_plain_gradient_descent(self, rng):
        params, grads = self.setup_params(rng)
        before = params.copy()
        sgd_step(params, grads, OptimizerState.zeros_like(params), 0.1, 0.0, 0.0)
        for p, p0, g in zip(params.arrays(), before.arrays(), grads.arrays()):
            np.testing.assert_allclose(p, p0 - 0.1 * g)

    def test_momentum_accumulates(self, rng):
        params, grads = self.setup_params(rng)
        state = OptimizerState.zeros_like(params)
        sgd_step(params, grads, state, 0.1, 0.9, 0.0)
        middle = params.copy()
        sgd_step(params, grads, state, 0.1, 0.9, 0.0)
        for p, p1, g in zip(params.arrays(), middle.arrays(), grads.arrays()):
            np.testing.assert_allclose(p1 - p, 0.1 * 1.9 * g, atol=1e-12)
        assert state.t == 2

    def test_matches_reference_recurrence(self, rng):
        params, _ = self.setup_params(rng)
        reference = [a.copy() for a in params.arrays()]
        buffers = [np.zeros_like(a) for a in reference]
        state = OptimizerState.zeros_like(params)
        for step in range(5):
            grads = init_params([3, 4, 4, 2], np.random.default_rng(step), dtype=np.float64)
            lr = 0.05 / (step + 1)
            sgd_step(params, grads, state, lr, 0.9, 1e-3)
            for i, g in enumerate(grads.arrays()):
                buffers[i] = 0.9 * buffers[i] + g + 1e-3 * reference[i]
                reference[i] = reference[i] - lr * buffers[i]
        for p, r in zip(params.arrays(), reference):
            np.testing.assert_allclose(p, r, rtol=1e-12, atol=1e-14)

    def test_non_finite_gradient(self, rng):
        params, grads = self.setup_params(rng)
        grads.layers[0][0][0, 0] = np.nan
        before = params.copy()
        with pytest.raises(NumericError):
            sgd_step(params, grads, OptimizerState.zeros_like(params), 0.1, 0.9, 0.0)
        for p, p0 in zip(params.arrays(), before.arrays()):
            np.testing.assert_array_equal(p, p0)


class TestTrainer:
    def test_runs_and_reports(self, small_dataset, small_train_config):
        result = train(small_dataset.samples, small_train_config)
        assert [r.epoch for r in result.metrics] == [0, 1]
        assert len(result.history) == 2 * int(np.ceil(len(small_dataset) / 16))
        assert all(np.isfinite(r.loss_total) for r in result.metrics)
        assert all(r.wall_ms == 0 for r in result.metrics)
        assert result.bank.count == len(small_dataset)
        check_cluster_consistency(result.state)

    def test_same_seed_same_metrics(self, small_dataset, small_train_config):
        a = train(small_dataset.samples, small_train_config)
        b = train(small_dataset.samples, small_train_config)
        assert metrics_lines(a) == metrics_lines(b)
        for x, y in zip(a.params.arrays(), b.params.arrays()):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.bank.features, b.bank.features)

    def test_thread_count_does_not_change_results(self, small_dataset, small_train_config):
        single = train(small_dataset.samples, small_train_config)
        pooled = train(small_dataset.samples, replace(small_train_config, threads=4))
        assert metrics_lines(single) == metrics_lines(pooled)
        np.testing.assert_array_equal(single.state.labels, pooled.state.labels)

    def test_different_seed_differs(self, small_dataset, small_train_config):
        a = train(small_dataset.samples, small_train_config)
        b = train(small_dataset.samples, replace(small_train_config, seed=1))
        assert metrics_lines(a) != metrics_lines(b)

    def test_lambda_one_is_intra_only(self, small_dataset, small_train_config):
        cfg = replace(small_train_config, loss=LossConfig(lam=1.0))
        result = train(small_dataset.samples, cfg)
        for entry in result.history:
            assert entry["loss_total"] == entry["loss_intra"]

        other = replace(cfg, sampling=SamplingConfig(strategy="hard", K=16))
        alternative = train(small_dataset.samples, other)
        for x, y in zip(result.params.arrays(), alternative.params.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_offline_labels(self, small_dataset, small_train_config):
        cfg = replace(small_train_config, label_mode="offline", offline_cadence_epochs=1)
        result = train(small_dataset.samples, cfg)
        assert all(entry["label_churn"] == 0.0 for entry in result.history)
        assert all(0.0 <= r.label_churn <= 1.0 for r in result.metrics)
        check_cluster_consistency(result.state)

    def test_evaluator_and_hook(self, small_dataset, small_train_config):
        seen = []

        def evaluator(params, bank, state):
            return {"knn_acc": 0.5, "nmi": 0.25}

        def hook(epoch, params, bank, state, record):
            seen.append((epoch, record.knn_acc))

        result = Trainer(small_train_config, evaluator=evaluator, on_epoch_end=hook).train(small_dataset.samples)
        assert seen == [(0, 0.5), (1, 0.5)]
        assert result.metrics[-1].nmi == 0.25

    def test_learning_rate_follows_schedule(self, small_dataset, small_train_config):
        result = train(small_dataset.samples, small_train_config)
        T = len(result.history)
        for entry in result.history:
            expected = lr_at(entry["iteration"], T, small_train_config.base_lr, small_train_config.resolved_final_lr)
            assert entry["lr"] == expected

    def test_batch_larger_than_data(self, small_dataset, small_train_config):
        with pytest.raises(ConfigurationError):
            train(small_dataset.samples, replace(small_train_config, batch_size=1000))

    def test_too_many_negatives(self, small_dataset, small_train_config):
        cfg = replace(small_train_config, sampling=SamplingConfig(K=len(small_dataset)))
        with pytest.raises(InsufficientPopulationError):
            train(small_dataset.samples, cfg)

    def test_repeated_train_starts_fresh_history(self, small_dataset, small_train_config):
        trainer = Trainer(small_train_config)
        first = trainer.train(small_dataset.samples)
        second = trainer.train(small_dataset.samples)
        assert len(second.history) == len(first.history)
        assert second.history == first.history

    def test_singleton_clusters_warn(self, small_dataset, small_train_config, caplog):
        cfg = replace(small_train_config, epochs=1, num_clusters=len(small_dataset))
        with caplog.at_level(logging.WARNING, logger="deskclr.trainer"):
            train(small_dataset.samples, cfg)
        warnings = [r for r in caplog.records if r.levelno == logging.WARNING and "sampling fallbacks" in r.getMessage()]
        assert warnings
        assert "singleton" in warnings[0].getMessage()

    def test_unresolved_cluster_count(self, small_train_config):
        with pytest.raises(ConfigurationError):
            Trainer(replace(small_train_config, num_clusters=None))


def test_consistency_check_detects_drift(small_dataset, small_train_config):
    result = train(small_dataset.samples, replace(small_train_config, epochs=1))
    state = result.state.copy()
    state.sums[0] += 1.0
    with pytest.raises(InvalidStateError):
        check_cluster_consistency(state)
