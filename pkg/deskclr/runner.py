"""
Run Pipeline Module for DeskCLR

Glue shared by the command line and the ablation grid: obtain the dataset a
configuration describes, split it, train with per-epoch checkpoints, and
evaluate a trained encoder on both splits.
"""
import json
import os
import logging
from dataclasses import replace

import numpy as np

from deskclr.checkpoint import save_checkpoint
from deskclr.configuration import RunConfig
from deskclr.datasets import gen_gaussian_mixture, load_dataset, load_idx, split
from deskclr.encoder import embed
from deskclr.errors import ConfigurationError, FormatError
from deskclr.evaluation import (
    build_evaluator,
    knn_accuracy,
    linear_probe,
    nearest_neighbor_dump,
    nmi,
    pca_2d,
    write_metrics_jsonl,
)
from deskclr.trainer import Trainer

logger = logging.getLogger(__name__)

DATA_STREAM = 6
SPLIT_STREAM = 7

CHECKPOINT_NAME = "checkpoint.bin"
LAST_CHECKPOINT_NAME = "checkpoint_last.bin"
METRICS_NAME = "metrics.jsonl"
RUN_CONFIG_NAME = "run_config.json"


def obtain_dataset(data_cfg, seed):
    """
    Load or generate the dataset a data configuration describes.

    A saved dataset file wins; otherwise an IDX pair is read or a Gaussian
    mixture generated from the seed.
    """
    if data_cfg.path:
        return load_dataset(data_cfg.path)
    if data_cfg.kind == "idx":
        if not data_cfg.images_path:
            raise ConfigurationError("data.kind 'idx' needs data.images_path")
        return load_idx(data_cfg.images_path, data_cfg.labels_path)
    return gen_gaussian_mixture(
        data_cfg.classes,
        data_cfg.per_class,
        data_cfg.dim,
        data_cfg.center_separation,
        data_cfg.within_std,
        np.random.default_rng([int(seed), DATA_STREAM]),
    )


def split_dataset(dataset, run_cfg):
    """Train/test split seeded by the run seed, so train and eval agree."""
    return split(dataset, run_cfg.data.test_fraction, np.random.default_rng([run_cfg.seed, SPLIT_STREAM]))


def resolve_train_config(run_cfg, dataset):
    """The run's TrainConfig with cluster count and image shape filled in from the data."""
    train_cfg = run_cfg.train
    if train_cfg.num_clusters is None and dataset.class_count < 1:
        raise ConfigurationError("clustering.k must be set explicitly for unlabeled data")
    train_cfg = train_cfg.with_class_count(dataset.class_count)
    if dataset.image_shape is not None and train_cfg.augmentation.image_shape is None:
        train_cfg = replace(train_cfg, augmentation=replace(train_cfg.augmentation, image_shape=tuple(dataset.image_shape)))
    return train_cfg


def run_training(run_cfg: RunConfig, out_dir=None):
    """
    Train on the configured dataset.

    When ``out_dir`` is given the resolved configuration, a checkpoint after
    every epoch, the final checkpoint and the metrics JSONL are written there.

    Returns:
        tuple: (TrainResult, train Dataset, test Dataset)
    """
    dataset = obtain_dataset(run_cfg.data, run_cfg.seed)
    train_set, test_set = split_dataset(dataset, run_cfg)
    train_cfg = resolve_train_config(run_cfg, dataset)

    evaluator = None
    if dataset.true_labels is not None:
        evaluator = build_evaluator(
            train_set.samples, train_set.true_labels, test_set.samples, test_set.true_labels, run_cfg.eval.knn_k
        )

    on_epoch_end = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, RUN_CONFIG_NAME), "w") as f:
            json.dump(run_cfg.to_dict(), f, indent=4, sort_keys=True)

        def on_epoch_end(epoch, params, bank, state, record):
            save_checkpoint(os.path.join(out_dir, LAST_CHECKPOINT_NAME), params, bank, state)

    result = Trainer(train_cfg, evaluator=evaluator, on_epoch_end=on_epoch_end).train(train_set.samples)

    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), result.params, result.bank, result.state)
        write_metrics_jsonl(result.metrics, os.path.join(out_dir, METRICS_NAME))
        logger.info(f"Wrote checkpoint and metrics to {out_dir}")
    return result, train_set, test_set


def evaluate_encoder(params, bank, state, train_set, test_set, eval_cfg):
    """
    Score a trained encoder.

    Returns:
        dict: knn_acc, linear_probe_acc, nmi, plus the PCA coordinates and the
        nearest-neighbor dump of the first test queries (both as lists)
    """
    if train_set.true_labels is None:
        raise ConfigurationError("Evaluation needs a labeled dataset")
    if bank.count != len(train_set):
        raise FormatError(f"Checkpoint holds {bank.count} instances but the training split has {len(train_set)}")
    train_embeddings = embed(params, train_set.samples)
    test_embeddings = embed(params, test_set.samples)

    results = {
        "knn_acc": knn_accuracy(
            train_embeddings, train_set.true_labels, test_embeddings, test_set.true_labels, eval_cfg.knn_k
        ),
        "linear_probe_acc": linear_probe(
            train_embeddings, train_set.true_labels, test_embeddings, test_set.true_labels,
            eval_cfg.probe_epochs, eval_cfg.probe_lr,
        ),
        "nmi": nmi(state.labels, train_set.true_labels),
    }
    coords = pca_2d(test_embeddings)
    queries = test_embeddings[:eval_cfg.neighbors_queries]
    ids, sims = nearest_neighbor_dump(queries, bank, min(eval_cfg.neighbors_top_n, bank.count))
    results["pca"] = [
        {"id": i, "pc1": float(x), "pc2": float(y), "label": int(label)}
        for i, ((x, y), label) in enumerate(zip(coords, test_set.true_labels))
    ]
    results["neighbors"] = [
        {"query": q, "ids": row_ids.tolist(), "similarities": row_sims.tolist()}
        for q, (row_ids, row_sims) in enumerate(zip(ids, sims))
    ]
    logger.info(
        f"Evaluation: knn {results['knn_acc']:.4f}, linear probe {results['linear_probe_acc']:.4f}, nmi {results['nmi']:.4f}"
    )
    return results
