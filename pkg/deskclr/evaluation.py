"""
Evaluation Module for DeskCLR

Representation-quality measures (cosine kNN, linear probe, NMI of the
pseudo-labels), a 2-D PCA projection for inspection, exact nearest-neighbor
retrieval against the memory bank, and the per-epoch metrics record with its
JSONL/CSV writers.
"""
import csv
import json
import logging
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from deskclr.encoder import embed
from deskclr.errors import ConfigurationError

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "metric", "value", "variant", "seed")


@dataclass
class MetricsRecord:
    """One epoch of training, the unit of all reporting."""

    epoch: int
    lr: float
    loss_total: float
    loss_intra: float
    loss_inter: float
    label_churn: float
    knn_acc: Optional[float] = None
    nmi: Optional[float] = None
    wall_ms: int = 0

    def __post_init__(self):
        for name in ("label_churn", "knn_acc", "nmi"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_json(self):
        return json.dumps(asdict(self))


def write_metrics_jsonl(records, path):
    """Write one JSON object per line, in epoch order."""
    with open(path, "w") as f:
        for record in records:
            f.write(record.to_json() + "\n")


def read_metrics_jsonl(path):
    with open(path, "r") as f:
        return [MetricsRecord(**json.loads(line)) for line in f if line.strip()]


def write_curve_rows(rows, path):
    """
    Write rows with the fixed columns epoch,metric,value,variant,seed.

    Args:
        rows (list): Dicts keyed by ``CURVE_COLUMNS``
        path (str): Destination CSV
    """
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in CURVE_COLUMNS})


def _unit_rows(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / np.where(norms == 0, 1.0, norms)


def _ranked_neighbors(queries, references, top_n):
    sims = _unit_rows(queries) @ _unit_rows(references).T
    # Stable sort of negated similarities keeps the lowest index first on ties.
    order = np.argsort(-sims, axis=1, kind="stable")[:, :top_n]
    return order, np.take_along_axis(sims, order, axis=1)


def knn_predict(train_embeddings, train_labels, test_embeddings, k):
    """
    Majority vote over the k most cosine-similar training points.

    Vote ties go to the tied label whose best-ranked neighbor comes first, so
    the single nearest neighbor decides whenever its label is among the tie.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    k = min(int(k), train_labels.shape[0])
    order, _ = _ranked_neighbors(test_embeddings, train_embeddings, k)
    predictions = np.empty(order.shape[0], dtype=np.int64)
    for q, neighbors in enumerate(order):
        votes = train_labels[neighbors]
        counts = np.bincount(votes)
        tied = counts == counts.max()
        predictions[q] = next(label for label in votes if tied[label])
    return predictions


def knn_accuracy(train_embeddings, train_labels, test_embeddings, test_labels, k=5):
    """
    Cosine kNN classification accuracy.

    Args:
        train_embeddings (numpy.ndarray): (n_train, D)
        train_labels (numpy.ndarray): n_train class ids
        test_embeddings (numpy.ndarray): (n_test, D)
        test_labels (numpy.ndarray): n_test class ids
        k (int): Neighbors per vote

    Returns:
        float: Fraction of test points classified correctly
    """
    if k < 1:
        raise ConfigurationError(f"kNN needs k >= 1, got {k}")
    if len(train_labels) == 0:
        raise ValueError("kNN needs a nonempty training set")
    if len(test_labels) == 0:
        raise ValueError("kNN needs a nonempty test set")
    predictions = knn_predict(train_embeddings, train_labels, test_embeddings, k)
    return float(np.mean(predictions == np.asarray(test_labels)))


def linear_probe(train_embeddings, train_labels, test_embeddings, test_labels, probe_epochs=200, probe_lr=0.5):
    """
    Multinomial logistic regression on frozen embeddings.

    Full-batch gradient descent from zero weights, with biases starting at the
    log class priors so an untrained probe predicts the most frequent class.

    Returns:
        float: Test accuracy
    """
    x_train = np.asarray(train_embeddings, dtype=np.float64)
    x_test = np.asarray(test_embeddings, dtype=np.float64)
    y_train = np.asarray(train_labels, dtype=np.int64)
    y_test = np.asarray(test_labels, dtype=np.int64)
    if np.unique(y_train).size < 2:
        raise ValueError("Linear probe needs at least two classes in the training set")

    n_classes = int(max(y_train.max(), y_test.max() if y_test.size else 0)) + 1
    priors = np.bincount(y_train, minlength=n_classes) / y_train.size
    weights = np.zeros((x_train.shape[1], n_classes))
    bias = np.log(np.maximum(priors, 1e-12))
    targets = np.eye(n_classes)[y_train]

    for _ in range(probe_epochs):
        logits = x_train @ weights + bias
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        residual = (probs - targets) / y_train.size
        weights -= probe_lr * (x_train.T @ residual)
        bias -= probe_lr * residual.sum(axis=0)

    predictions = np.argmax(x_test @ weights + bias, axis=1)
    return float(np.mean(predictions == y_test))


def _entropy(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(labels_a, labels_b):
    """
    Normalized mutual information with arithmetic-mean normalization.

    Two single-cluster partitions score 1.

    Returns:
        float: Score in [0, 1]
    """
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape:
        raise ValueError(f"Label lengths differ: {labels_a.shape} vs {labels_b.shape}")
    if labels_a.size == 0:
        raise ValueError("NMI needs at least one label")

    _, ia = np.unique(labels_a, return_inverse=True)
    _, ib = np.unique(labels_b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    joint = table / labels_a.size
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)

    ha, hb = _entropy(pa), _entropy(pb)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])))
    return float(np.clip(mi / ((ha + hb) / 2.0), 0.0, 1.0))


def pca_2d(embeddings):
    """
    Project onto the top two principal components.

    Each component's sign is fixed so its largest-magnitude loading is positive.

    Returns:
        numpy.ndarray: (N, 2) coordinates
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError(f"PCA needs at least 2 points, got {x.shape[0]}")
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    components = vt[:2].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return x @ components.T


def nearest_neighbor_dump(query_embeddings, bank, top_n):
    """
    Exact top-n retrieval from the memory bank by cosine similarity.

    Returns:
        tuple: (ids (Q, top_n), similarities (Q, top_n)), descending, ties by lowest id
    """
    features = getattr(bank, "features", bank)
    if top_n > features.shape[0]:
        raise ConfigurationError(f"Cannot retrieve {top_n} neighbors from {features.shape[0]} rows")
    queries = np.atleast_2d(np.asarray(query_embeddings, dtype=np.float64))
    return _ranked_neighbors(queries, features, top_n)


def build_evaluator(train_samples, train_labels, test_samples, test_labels, knn_k=5):
    """
    Per-epoch quality callback for the trainer.

    The returned callable embeds both splits with the current parameters and
    reports cosine kNN accuracy plus the NMI between the pseudo-labels and the
    true training labels.
    """
    def evaluate(params, bank, state):
        train_embeddings = embed(params, train_samples)
        test_embeddings = embed(params, test_samples)
        return {
            "knn_acc": knn_accuracy(train_embeddings, train_labels, test_embeddings, test_labels, knn_k),
            "nmi": nmi(state.labels, train_labels),
        }

    return evaluate
