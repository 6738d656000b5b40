import numpy as np
import pytest

from deskclr.errors import NumericError
from deskclr.losses import (
    PairBatch,
    combined_loss,
    grad_margin_nce,
    info_nce,
    margin_nce,
    margin_nce_batch,
)
from tests.conftest import unit_rows


def angled(cosine):
    return np.array([cosine, np.sqrt(1.0 - cosine ** 2)])


def numeric_grad(pair, tau, m, h=1e-5):
    grad = np.zeros_like(pair.anchor)
    for i in range(pair.anchor.size):
        step = np.zeros_like(pair.anchor)
        step[i] = h
        up = PairBatch(pair.anchor + step, pair.positive, pair.negatives)
        down = PairBatch(pair.anchor - step, pair.positive, pair.negatives)
        grad[i] = (margin_nce(up, tau, m) - margin_nce(down, tau, m)) / (2 * h)
    return grad


def random_pair(rng, d, k):
    rows = unit_rows(rng, k + 2, d)
    return PairBatch(rows[0], rows[1], rows[2:])


class TestInfoNCE:
    def test_symmetric_case(self, rng):
        v, u = unit_rows(rng, 2, 4)
        assert info_nce(PairBatch(v, u, u[None]), 0.1) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_scalar_evaluation(self):
        pair = PairBatch(np.array([1.0, 0.0]), angled(0.9), angled(0.1)[None])
        assert info_nce(pair, 0.1) == pytest.approx(np.log1p(np.exp(-8.0)), rel=1e-9)

    def test_large_logits_stay_finite(self):
        pair = PairBatch(np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([[1.0, 0.0]]))
        loss = info_nce(pair, 0.001)
        assert np.isfinite(loss)
        assert loss == pytest.approx(2000.0, rel=1e-9)

    def test_non_finite_input(self):
        pair = PairBatch(np.array([np.nan, 0.0]), np.array([1.0, 0.0]), np.array([[0.0, 1.0]]))
        with pytest.raises(NumericError):
            info_nce(pair, 0.1)


class TestMarginNCE:
    @pytest.mark.parametrize("k", [1, 8, 64])
    def test_zero_margin_is_info_nce(self, rng, k):
        for _ in range(3000):
            pair = random_pair(rng, 32, k)
            assert abs(margin_nce(pair, 0.1, 0.0) - info_nce(pair, 0.1)) <= 1e-12

    def test_negative_margin_scalar(self):
        pair = PairBatch(np.array([1.0, 0.0]), angled(0.9), angled(0.1)[None])
        assert margin_nce(pair, 0.1, -0.5) == pytest.approx(np.log1p(np.exp(-13.0)), rel=1e-6)

    def test_positive_margin_raises_loss(self, rng):
        pair = random_pair(rng, 8, 4)
        assert margin_nce(pair, 0.1, 0.5) > margin_nce(pair, 0.1, 0.0) > margin_nce(pair, 0.1, -0.5)

    def test_batch_matches_single(self, rng):
        anchors = unit_rows(rng, 6, 8)
        positives = unit_rows(rng, 6, 8)
        negatives = unit_rows(rng, 30, 8).reshape(6, 5, 8)
        losses, grads = margin_nce_batch(anchors, positives, negatives, 0.2, -0.25)
        for i in range(6):
            pair = PairBatch(anchors[i], positives[i], negatives[i])
            assert losses[i] == pytest.approx(margin_nce(pair, 0.2, -0.25), rel=1e-12)
            np.testing.assert_allclose(grads[i], grad_margin_nce(pair, 0.2, -0.25), rtol=1e-12, atol=1e-14)


class TestCombinedLoss:
    def test_endpoints_are_exact(self):
        assert combined_loss(1.2345, 6.789, 1.0) == 1.2345
        assert combined_loss(1.2345, 6.789, 0.0) == 6.789

    def test_weighted(self):
        assert combined_loss(1.0, 3.0, 0.75) == pytest.approx(1.5)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            combined_loss(1.0, np.inf, 1.0)


class TestGradient:
    def test_identical_positive_and_negative_cancel(self, rng):
        v, u = unit_rows(rng, 2, 6)
        for tau, m in [(0.1, 0.0), (0.07, 0.5), (0.5, -0.5)]:
            grad = grad_margin_nce(PairBatch(v, u, u[None]), tau, m)
            assert np.all(grad == 0.0)

    def test_finite_differences(self, rng):
        pair = random_pair(rng, 8, 5)
        analytic = grad_margin_nce(pair, 0.1, -0.5)
        numeric = numeric_grad(pair, 0.1, -0.5)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) <= 1e-6

    def test_finite_differences_sweep(self, rng):
        settings = [(tau, m) for tau in (0.07, 0.1, 0.5) for m in (-0.5, 0.0, 0.5)]
        for i in range(100):
            tau, m = settings[i % len(settings)]
            pair = random_pair(rng, 8, int(rng.integers(1, 6)))
            analytic = grad_margin_nce(pair, tau, m)
            numeric = numeric_grad(pair, tau, m)
            scale = max(np.linalg.norm(analytic), 1e-8)
            assert np.linalg.norm(analytic - numeric) / scale <= 1e-4

    def test_saturation(self):
        v = np.array([1.0, 0.0, 0.0])
        pair = PairBatch(v, v, np.array([[-1.0, 0.0, 0.0]]))
        # v.v+ - m = 3
        grad = grad_margin_nce(pair, 0.1, -2.0)
        assert np.linalg.norm(grad) < 1e-10
