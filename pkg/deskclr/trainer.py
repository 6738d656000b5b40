"""
Trainer Module for DeskCLR

Runs the per-iteration loop: augment, encode, intra- and inter-image margin
losses, SGD step, memory bank momentum update and pseudo-label update, under a
cosine learning-rate schedule.
"""
import math
import time
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from deskclr.augmentation import augment_batch
from deskclr.clustering import ClusterState, global_kmeans, minibatch_update, offline_relabel
from deskclr.configuration import TrainConfig
from deskclr.encoder import EncoderParams, backward, embed, forward, init_params
from deskclr.errors import (
    ConfigurationError,
    InsufficientPopulationError,
    InvalidStateError,
    NoNegativesError,
    NumericError,
)
from deskclr.evaluation import MetricsRecord
from deskclr.losses import combined_loss, margin_nce_batch
from deskclr.memory_bank import MemoryBank
from deskclr.sampling import anchor_similarities, sample_negatives, sample_positive_inter

logger = logging.getLogger(__name__)

INIT_STREAM = 2
CLUSTER_STREAM = 3
ORDER_STREAM = 4
SAMPLE_STREAM = 5

CONSISTENCY_ATOL = 1e-3


def lr_at(t, T, base_lr, final_lr):
    """
    Cosine-decayed learning rate.

    Args:
        t (int): Iteration, 0 <= t <= T
        T (int): Total iterations
        base_lr (float): Rate at t = 0
        final_lr (float): Rate at t = T

    Returns:
        float: final_lr + (base_lr - final_lr) * (1 + cos(pi * t / T)) / 2
    """
    if not 0 <= t <= T:
        raise ValueError(f"Iteration {t} outside the schedule [0, {T}]")
    weight = 0.5 * (1.0 + math.cos(math.pi * t / T)) if T > 0 else 1.0
    # Written as a convex combination so both endpoints come out exactly.
    return base_lr * weight + final_lr * (1.0 - weight)


@dataclass
class OptimizerState:
    """SGD momentum buffers, one per parameter array, and the step counter."""

    buffers: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(a) for a in params.arrays()])


def sgd_step(params, grads, state, lr, momentum, weight_decay):
    """
    One SGD step with momentum and coupled weight decay, in place.

    buf <- momentum * buf + (grad + weight_decay * param); param <- param - lr * buf

    Returns:
        tuple: (params, state)

    Raises:
        NumericError: If any gradient is non-finite
    """
    param_arrays = params.arrays()
    grad_arrays = grads.arrays()
    if len(param_arrays) != len(grad_arrays) or len(param_arrays) != len(state.buffers):
        raise ValueError("Parameter, gradient and buffer structures differ")
    for grad in grad_arrays:
        if not np.all(np.isfinite(grad)):
            raise NumericError("Non-finite gradient, aborting training")

    for param, grad, buf in zip(param_arrays, grad_arrays, state.buffers):
        if param.shape != grad.shape:
            raise ValueError(f"Gradient shape {grad.shape} does not match parameter {param.shape}")
        buf *= momentum
        buf += grad + weight_decay * param
        param -= lr * buf
    state.t += 1
    return params, state


@dataclass
class TrainResult:
    params: EncoderParams
    bank: MemoryBank
    state: ClusterState
    metrics: List[MetricsRecord] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)


def check_cluster_consistency(state, atol=CONSISTENCY_ATOL):
    """
    Full recompute of the clustering statistics.

    Raises:
        InvalidStateError: If counts, sums or centroids drifted from the labels
    """
    if state.counts.sum() != state.count:
        raise InvalidStateError(f"Cluster counts sum to {state.counts.sum()}, expected {state.count}")
    fresh = ClusterState.from_labels(state.labels, state.assigned, state.k)
    if not np.array_equal(fresh.counts, state.counts):
        raise InvalidStateError("Cluster counts disagree with labels")
    if not np.allclose(fresh.sums, state.sums, atol=atol):
        raise InvalidStateError("Cluster sums drifted from a full recompute")
    filled = state.counts > 0
    if not np.allclose(fresh.centroids[filled], state.centroids[filled], atol=atol):
        raise InvalidStateError("Centroids disagree with sums / counts")


class Trainer:
    """
    Joint intra-/inter-image contrastive trainer.

    The trainer only ever sees sample vectors. Ground-truth quality numbers
    come from the optional ``evaluator`` callback.
    """

    def __init__(self, config: TrainConfig, evaluator: Optional[Callable] = None,
                 on_epoch_end: Optional[Callable] = None):
        """
        Initialize the trainer.

        Args:
            config (TrainConfig): Training configuration with num_clusters resolved
            evaluator (callable): (params, bank, state) -> {"knn_acc": .., "nmi": ..}
            on_epoch_end (callable): (epoch, params, bank, state, record) hook, e.g. checkpointing
        """
        if config.num_clusters is None:
            raise ConfigurationError("clustering.k must be resolved before training")
        self.config = config
        self.evaluator = evaluator
        self.on_epoch_end = on_epoch_end
        self.history = []
        self._fallbacks = {"singleton": 0, "no_negatives": 0}

    def _validate(self, samples):
        cfg = self.config
        n = samples.shape[0]
        if n < 2:
            raise ConfigurationError(f"Training needs at least 2 samples, got {n}")
        if cfg.batch_size > n:
            raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds the {n} training samples")
        if cfg.sampling.K > n - 1:
            raise InsufficientPopulationError(f"K={cfg.sampling.K} negatives need more than {n} samples")
        if cfg.num_clusters > n:
            raise ConfigurationError(f"Cannot form {cfg.num_clusters} clusters from {n} samples")
        if not np.all(np.isfinite(samples)):
            raise NumericError("Training samples contain non-finite values")

    def _sample_anchor(self, iteration, position, anchor, bank, state, similarities=None):
        """Intra negatives, inter positive and inter negatives for one anchor."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, SAMPLE_STREAM, iteration, position])
        intra_negatives = bank.sample_index_negatives(anchor, cfg.sampling.K, rng)
        inter_positive = sample_positive_inter(anchor, state, bank, rng)
        try:
            inter_negatives = sample_negatives(anchor, bank, state, cfg.sampling, rng, similarities)
            no_negatives = False
        except NoNegativesError:
            inter_negatives = bank.sample_index_negatives(anchor, cfg.sampling.K, rng)
            no_negatives = True
        return intra_negatives, inter_positive, inter_negatives, no_negatives

    def _sample_batch(self, executor, iteration, indices, bank, state):
        sims = None if self.config.sampling.strategy == "random" else anchor_similarities(indices, bank)

        def task(position):
            row = None if sims is None else sims[position]
            return self._sample_anchor(iteration, position, int(indices[position]), bank, state, row)

        positions = range(len(indices))
        if executor is None:
            results = [task(p) for p in positions]
        elif self.config.deterministic:
            results = list(executor.map(task, positions))
        else:
            results = [None] * len(indices)
            futures = {executor.submit(task, p): p for p in positions}
            for future in as_completed(futures):
                results[futures[future]] = future.result()

        intra_neg = np.stack([r[0] for r in results])
        inter_pos = np.array([r[1] for r in results], dtype=np.int64)
        inter_neg = np.stack([r[2] for r in results])
        self._fallbacks["singleton"] += int(np.sum(inter_pos == indices))
        self._fallbacks["no_negatives"] += sum(r[3] for r in results)
        return intra_neg, inter_pos, inter_neg

    def _step(self, executor, samples, indices, epoch, t, T, params, opt_state, bank, state):
        cfg = self.config
        loss_cfg = cfg.loss
        lr = lr_at(t, T, cfg.base_lr, cfg.resolved_final_lr)

        views = augment_batch(samples, indices, cfg.augmentation, cfg.seed, epoch)
        embeddings, cache = forward(params, views)

        intra_neg, inter_pos, inter_neg = self._sample_batch(executor, t, indices, bank, state)
        features = bank.features
        intra_losses, intra_grads = margin_nce_batch(
            embeddings, features[indices], features[intra_neg], loss_cfg.tau, loss_cfg.m_intra
        )
        inter_losses, inter_grads = margin_nce_batch(
            embeddings, features[inter_pos], features[inter_neg], loss_cfg.tau, loss_cfg.m_inter
        )
        loss_intra = float(intra_losses.mean())
        loss_inter = float(inter_losses.mean())
        loss_total = combined_loss(loss_intra, loss_inter, loss_cfg.lam)

        grad_embeddings = (loss_cfg.lam * intra_grads + (1.0 - loss_cfg.lam) * inter_grads) / len(indices)
        grads = backward(params, cache, grad_embeddings)
        sgd_step(params, grads, opt_state, lr, cfg.sgd_momentum, cfg.weight_decay)

        bank.momentum_update(indices, embeddings)
        if cfg.label_mode == "online":
            minibatch_update(state, indices, bank, self._cluster_rng)
            churn = state.last_churn
        else:
            churn = 0.0

        entry = {
            "iteration": t,
            "epoch": epoch,
            "lr": lr,
            "loss_total": loss_total,
            "loss_intra": loss_intra,
            "loss_inter": loss_inter,
            "label_churn": churn,
        }
        self.history.append(entry)
        return entry

    def train(self, samples):
        """
        Train an encoder on unlabeled samples.

        Args:
            samples (numpy.ndarray): (N, d_in) training samples

        Returns:
            TrainResult: Final params, bank, clustering, per-epoch metrics and per-iteration history

        Raises:
            ConfigurationError: If the configuration does not fit the data
            NumericError: If a loss or gradient becomes non-finite
        """
        cfg = self.config
        samples = np.asarray(samples, dtype=np.float32)
        self._validate(samples)
        n = samples.shape[0]
        self.history = []

        params = init_params(cfg.encoder_dims(samples.shape[1]), np.random.default_rng([cfg.seed, INIT_STREAM]))
        opt_state = OptimizerState.zeros_like(params)
        self._cluster_rng = np.random.default_rng([cfg.seed, CLUSTER_STREAM])

        bank = MemoryBank(embed(params, samples), cfg.omega)
        state = global_kmeans(bank, cfg.num_clusters, cfg.kmeans_max_iters, cfg.kmeans_tol, self._cluster_rng)

        iterations_per_epoch = math.ceil(n / cfg.batch_size)
        T = cfg.epochs * iterations_per_epoch
        logger.info(
            f"Training on {n} samples: {cfg.epochs} epochs x {iterations_per_epoch} iterations, "
            f"{cfg.num_clusters} clusters, {cfg.label_mode} labels, {cfg.sampling.strategy} negatives"
        )

        metrics = []
        executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        t = 0
        try:
            for epoch in range(cfg.epochs):
                started = time.perf_counter()
                self._fallbacks = {"singleton": 0, "no_negatives": 0}
                order = np.random.default_rng([cfg.seed, ORDER_STREAM, epoch]).permutation(n)
                entries = []
                for start in range(0, n, cfg.batch_size):
                    indices = order[start:start + cfg.batch_size]
                    entries.append(self._step(executor, samples, indices, epoch, t, T, params, opt_state, bank, state))
                    t += 1

                churn = float(np.mean([e["label_churn"] for e in entries]))
                if cfg.label_mode == "offline" and (epoch + 1) % cfg.offline_cadence_epochs == 0:
                    previous = state.labels.copy()
                    state = offline_relabel(bank, cfg.num_clusters, self._cluster_rng,
                                            cfg.kmeans_max_iters, cfg.kmeans_tol)
                    churn = float(np.mean(previous != state.labels))

                check_cluster_consistency(state)
                scores = self.evaluator(params, bank, state) if self.evaluator else {}
                wall_ms = 0 if cfg.deterministic else int(round(1000 * (time.perf_counter() - started)))
                record = MetricsRecord(
                    epoch=epoch,
                    lr=entries[-1]["lr"],
                    loss_total=float(np.mean([e["loss_total"] for e in entries])),
                    loss_intra=float(np.mean([e["loss_intra"] for e in entries])),
                    loss_inter=float(np.mean([e["loss_inter"] for e in entries])),
                    label_churn=churn,
                    knn_acc=scores.get("knn_acc"),
                    nmi=scores.get("nmi"),
                    wall_ms=wall_ms,
                )
                metrics.append(record)
                logger.info(
                    f"Epoch {epoch}: loss {record.loss_total:.4f} (intra {record.loss_intra:.4f}, "
                    f"inter {record.loss_inter:.4f}), churn {record.label_churn:.3f}, knn {record.knn_acc}"
                )
                if any(self._fallbacks.values()):
                    logger.warning(f"Epoch {epoch} sampling fallbacks: {self._fallbacks}")
                if self.on_epoch_end:
                    self.on_epoch_end(epoch, params, bank, state, record)
        except NumericError as e:
            logger.error(f"Training aborted at iteration {t}: {e}", exc_info=True)
            raise
        finally:
            if executor is not None:
                executor.shutdown()

        return TrainResult(params=params, bank=bank, state=state, metrics=metrics, history=self.history)


def train(samples, config, evaluator=None, on_epoch_end=None):
    """Train with a fresh Trainer; see ``Trainer.train``."""
    return Trainer(config, evaluator=evaluator, on_epoch_end=on_epoch_end).train(samples)
