"""
Loss Module for DeskCLR

InfoNCE, the margin variant (the positive logit is shifted by a cosine margin
m), the weighted intra/inter combination, and the analytic gradient with
respect to the anchor embedding. Positives and negatives come from the memory
bank and are treated as constants.
"""
import logging
from dataclasses import dataclass

import numpy as np

from deskclr.errors import NumericError

logger = logging.getLogger(__name__)


@dataclass
class PairBatch:
    """One anchor with its positive and K negatives, all unit-norm."""

    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64).reshape(-1)
        self.positive = np.asarray(self.positive, dtype=np.float64).reshape(-1)
        self.negatives = np.asarray(self.negatives, dtype=np.float64).reshape(-1, self.anchor.shape[0])
        if self.negatives.shape[0] < 1:
            raise ValueError("A pair batch needs at least one negative")


def _check_finite(*arrays):
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NumericError("Non-finite value in contrastive loss input")


def _log_softmax_first(logits):
    """-log softmax(logits)[..., 0] with the max shifted out; never negative."""
    shift = logits.max(axis=-1, keepdims=True)
    exp = np.exp(logits - shift)
    total = exp.sum(axis=-1)
    loss = shift[..., 0] + np.log(total) - logits[..., 0]
    return np.maximum(loss, 0.0), exp / total[..., None]


def _margin_logits(anchors, positives, negatives, tau, m):
    pos = (np.einsum("...d,...d->...", anchors, positives) - m) / tau
    neg = np.einsum("...kd,...d->...k", negatives, anchors) / tau
    return np.concatenate([pos[..., None], neg], axis=-1)


def info_nce(pair, tau):
    """
    InfoNCE loss of a single anchor.

    Args:
        pair (PairBatch): Anchor, positive and negatives
        tau (float): Temperature

    Returns:
        float: -log(exp(v.v+/tau) / (exp(v.v+/tau) + sum exp(v.v-/tau)))
    """
    _check_finite(pair.anchor, pair.positive, pair.negatives)
    pos = np.dot(pair.anchor, pair.positive) / tau
    neg = pair.negatives @ pair.anchor / tau
    loss, _ = _log_softmax_first(np.concatenate([[pos], neg]))
    return float(loss)


def margin_nce(pair, tau, m):
    """
    Margin contrastive loss of a single anchor.

    Identical to InfoNCE except the positive cosine is reduced by ``m``:
    m > 0 tightens the decision boundary, m < 0 loosens it.

    Returns:
        float: Loss value
    """
    _check_finite(pair.anchor, pair.positive, pair.negatives)
    logits = _margin_logits(pair.anchor, pair.positive, pair.negatives, tau, m)
    loss, _ = _log_softmax_first(logits)
    return float(loss)


def _anchor_gradient(probs, positives, negatives, tau):
    neg_probs = probs[..., 1:]
    # p+ - 1 written as minus the negatives' mass so identical rows cancel exactly.
    pos_weight = -neg_probs.sum(axis=-1)
    return (pos_weight[..., None] * positives + np.einsum("...k,...kd->...d", neg_probs, negatives)) / tau


def grad_margin_nce(pair, tau, m):
    """
    Gradient of margin_nce with respect to the anchor.

    dL/dv = ((p+ - 1) v+ + sum_j p_j v_j) / tau, with p the softmax of the
    shifted logits. Positive and negatives receive no gradient.

    Returns:
        numpy.ndarray: D-vector
    """
    _check_finite(pair.anchor, pair.positive, pair.negatives)
    logits = _margin_logits(pair.anchor, pair.positive, pair.negatives, tau, m)
    _, probs = _log_softmax_first(logits)
    return _anchor_gradient(probs, pair.positive, pair.negatives, tau)


def margin_nce_batch(anchors, positives, negatives, tau, m):
    """
    Vectorized margin_nce and its anchor gradient over a batch.

    Args:
        anchors (numpy.ndarray): (B, D) current embeddings
        positives (numpy.ndarray): (B, D) positive bank features
        negatives (numpy.ndarray): (B, K, D) negative bank features
        tau (float): Temperature
        m (float): Cosine margin

    Returns:
        tuple: (per-anchor losses (B,), per-anchor gradients (B, D)), both float64
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    _check_finite(anchors, positives, negatives)
    logits = _margin_logits(anchors, positives, negatives, tau, m)
    losses, probs = _log_softmax_first(logits)
    return losses, _anchor_gradient(probs, positives, negatives, tau)


def combined_loss(intra_term, inter_term, lam):
    """
    Weighted sum of the intra- and inter-image terms.

    Returns:
        float: lam * intra + (1 - lam) * inter
    """
    if not (np.isfinite(intra_term) and np.isfinite(inter_term)):
        raise NumericError(f"Non-finite loss term: intra={intra_term}, inter={inter_term}")
    return lam * intra_term + (1.0 - lam) * inter_term
