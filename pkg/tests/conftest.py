import json

import numpy as np
import pytest

from deskclr.configuration import (
    AugmentConfig,
    DataConfig,
    EvalConfig,
    RunConfig,
    SamplingConfig,
    TrainConfig,
)
from deskclr.datasets import gen_gaussian_mixture
from deskclr.memory_bank import normalize_rows


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def unit_rows(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)), dtype=np.float64)


@pytest.fixture
def small_dataset():
    return gen_gaussian_mixture(3, 40, 6, 4.0, 0.5, np.random.default_rng(7))


@pytest.fixture
def small_train_config():
    return TrainConfig(
        epochs=2,
        batch_size=16,
        hidden=(16,),
        head_hidden=16,
        embedding_dim=8,
        num_clusters=6,
        sampling=SamplingConfig(K=16),
        augmentation=AugmentConfig(gaussian_noise_sigma=0.1),
    )


@pytest.fixture
def small_run_config(small_train_config, tmp_path):
    return RunConfig(
        train=small_train_config,
        data=DataConfig(classes=3, per_class=30, dim=6),
        eval=EvalConfig(probe_epochs=20, neighbors_top_n=3, neighbors_queries=4),
        out_dir=str(tmp_path / "run"),
        seeds=(0, 1),
    )


SMALL_CONFIG = {
    "data": {"classes": 3, "per_class": 30, "dim": 6},
    "encoder": {"hidden": [16], "head_hidden": 16, "embedding_dim": 8},
    "clustering": {"k": 6},
    "sampling": {"K": 16},
    "train": {"epochs": 2, "batch_size": 16},
    "eval": {"probe_epochs": 20, "neighbors_top_n": 3, "neighbors_queries": 4},
    "run": {"seeds": [0, 1]},
}


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)
