"""
Configuration Module for DeskCLR

Handles run settings: a strict JSON configuration file layered over defaults,
and the typed configuration objects the engine consumes.
"""
import copy
import json
import os
import logging
from dataclasses import dataclass, field, replace, asdict
from typing import Optional, Tuple

from deskclr.errors import ConfigurationError

logger = logging.getLogger(__name__)

STRATEGIES = ("hard", "semi_hard", "random", "semi_easy")
LABEL_MODES = ("online", "offline")

# Pseudo-label over-clustering factor relative to the number of true classes.
OVERCLUSTER_FACTOR = 10


@dataclass(frozen=True)
class LossConfig:
    """Temperature, cosine margins and branch weight of the combined loss."""

    tau: float = 0.1
    m_intra: float = 0.0
    m_inter: float = -0.5
    lam: float = 0.75

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"loss.tau must be > 0, got {self.tau}")
        for name in ("m_intra", "m_inter"):
            value = getattr(self, name)
            if not -2.0 < value < 2.0:
                raise ConfigurationError(f"loss.{name} must lie in (-2, 2), got {value}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"loss.lambda must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class SamplingConfig:
    """Negative sampling strategy for the inter-image branch."""

    strategy: str = "semi_hard"
    K: int = 256
    pool_fraction: float = 0.10

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"sampling.strategy must be one of {', '.join(STRATEGIES)}, got '{self.strategy}'"
            )
        if self.K < 1:
            raise ConfigurationError(f"sampling.K must be >= 1, got {self.K}")
        if not 0.0 < self.pool_fraction <= 1.0:
            raise ConfigurationError(
                f"sampling.pool_fraction must lie in (0, 1], got {self.pool_fraction}"
            )


@dataclass(frozen=True)
class AugmentConfig:
    """
    Desk-scale view augmentations.

    Vector data uses the first three knobs. When ``image_shape`` is set the
    sample is treated as an (H, W) image and the last three knobs apply.
    """

    gaussian_noise_sigma: float = 0.3
    mask_fraction: float = 0.1
    scale_jitter_range: Tuple[float, float] = (0.8, 1.2)
    crop_padding: int = 0
    flip_enabled: bool = False
    noise_sigma: float = 0.0
    image_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ConfigurationError(
                f"augment.mask_fraction must lie in [0, 1), got {self.mask_fraction}"
            )
        if self.gaussian_noise_sigma < 0 or self.noise_sigma < 0:
            raise ConfigurationError("augment noise sigmas must be >= 0")
        low, high = self.scale_jitter_range
        if not 0 < low <= high:
            raise ConfigurationError(
                f"augment.scale_jitter_range must satisfy 0 < low <= high, got {self.scale_jitter_range}"
            )
        if self.crop_padding < 0:
            raise ConfigurationError(f"augment.crop_padding must be >= 0, got {self.crop_padding}")
        if self.image_shape is not None and len(self.image_shape) != 2:
            raise ConfigurationError(f"augment.image_shape must be (H, W), got {self.image_shape}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything the trainer needs, with the sampling/loss/augment sub-configs embedded."""

    epochs: int = 50
    batch_size: int = 128
    base_lr: float = 0.03
    final_lr: Optional[float] = None
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    label_mode: str = "online"
    offline_cadence_epochs: int = 5
    seed: int = 0
    deterministic: bool = True
    threads: int = 1
    omega: float = 0.5
    num_clusters: Optional[int] = None
    kmeans_max_iters: int = 50
    kmeans_tol: float = 1e-6
    hidden: Tuple[int, ...] = (128, 128)
    head_hidden: int = 64
    embedding_dim: int = 32
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigurationError(f"train.base_lr must be > 0, got {self.base_lr}")
        if self.final_lr is not None and self.final_lr < 0:
            raise ConfigurationError(f"train.final_lr must be >= 0, got {self.final_lr}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigurationError(
                f"train.label_mode must be one of {', '.join(LABEL_MODES)}, got '{self.label_mode}'"
            )
        if self.offline_cadence_epochs < 1:
            raise ConfigurationError("train.offline_cadence_epochs must be >= 1")
        if not 0.0 < self.omega <= 1.0:
            raise ConfigurationError(f"memory_bank.omega must lie in (0, 1], got {self.omega}")
        if self.num_clusters is not None and self.num_clusters < 1:
            raise ConfigurationError(f"clustering.k must be >= 1, got {self.num_clusters}")
        if self.embedding_dim < 2:
            raise ConfigurationError(f"encoder.embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.threads < 1:
            raise ConfigurationError(f"thread count must be >= 1, got {self.threads}")

    @property
    def resolved_final_lr(self):
        """The cosine schedule floor; defaults to a thousandth of the base rate."""
        return self.base_lr * 1e-3 if self.final_lr is None else self.final_lr

    def encoder_dims(self, d_in):
        """Layer widths from the input through backbone and head to the embedding."""
        return [int(d_in), *[int(h) for h in self.hidden], int(self.head_hidden), int(self.embedding_dim)]

    def with_class_count(self, class_count):
        """Fill in the over-clustered cluster count when none was configured."""
        if self.num_clusters is not None:
            return self
        return replace(self, num_clusters=OVERCLUSTER_FACTOR * int(class_count))


@dataclass(frozen=True)
class DataConfig:
    """Where the dataset comes from and how it is split."""

    kind: str = "gaussian"
    path: Optional[str] = None
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_fraction: float = 0.2
    classes: int = 5
    per_class: int = 1000
    dim: int = 16
    center_separation: float = 4.0
    within_std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "idx"):
            raise ConfigurationError(f"data.kind must be 'gaussian' or 'idx', got '{self.kind}'")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"data.test_fraction must lie in (0, 1), got {self.test_fraction}")


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 5
    probe_epochs: int = 200
    probe_lr: float = 0.5
    neighbors_top_n: int = 5
    neighbors_queries: int = 10

    def __post_init__(self):
        if self.knn_k < 1:
            raise ConfigurationError(f"eval.knn_k must be >= 1, got {self.knn_k}")
        if self.probe_epochs < 0:
            raise ConfigurationError(f"eval.probe_epochs must be >= 0, got {self.probe_epochs}")


@dataclass(frozen=True)
class RunConfig:
    """The union of every sub-configuration plus run bookkeeping."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    log_level: str = "INFO"

    @property
    def seed(self):
        return self.train.seed

    def with_seed(self, seed):
        return replace(self, train=replace(self.train, seed=int(seed)))

    def to_dict(self):
        return asdict(self)


class Configuration:
    """
    Manages run settings and provides persistence.

    Unlike a forgiving settings store, unknown sections or keys are rejected so
    that a typo can never silently fall back to a default.
    """

    DEFAULT_CONFIG = {
        "data": {
            "kind": "gaussian",        # gaussian | idx
            "path": None,              # saved dataset file; generated when None
            "images_path": None,       # IDX images (kind = idx)
            "labels_path": None,       # IDX labels (kind = idx)
            "test_fraction": 0.2,
            "classes": 5,
            "per_class": 1000,
            "dim": 16,
            "center_separation": 4.0,
            "within_std": 1.0
        },
        "encoder": {
            "hidden": [128, 128],
            "head_hidden": 64,
            "embedding_dim": 32
        },
        "memory_bank": {
            "omega": 0.5               # momentum coefficient
        },
        "clustering": {
            "k": None,                 # None -> 10x the number of classes
            "kmeans_max_iters": 50,
            "kmeans_tol": 1e-6
        },
        "sampling": {
            "strategy": "semi_hard",
            "K": 256,
            "pool_fraction": 0.10
        },
        "loss": {
            "tau": 0.1,
            "m_intra": 0.0,
            "m_inter": -0.5,
            "lambda": 0.75
        },
        "train": {
            "epochs": 50,
            "batch_size": 128,
            "base_lr": 0.03,
            "final_lr": None,          # None -> base_lr * 1e-3
            "sgd_momentum": 0.9,
            "weight_decay": 1e-4,
            "label_mode": "online",
            "offline_cadence_epochs": 5,
            "deterministic": True
        },
        "augment": {
            "gaussian_noise_sigma": 0.3,
            "mask_fraction": 0.1,
            "scale_jitter_range": [0.8, 1.2],
            "crop_padding": 0,
            "flip_enabled": False,
            "noise_sigma": 0.0,
            "image_shape": None
        },
        "eval": {
            "knn_k": 5,
            "probe_epochs": 200,
            "probe_lr": 0.5,
            "neighbors_top_n": 5,
            "neighbors_queries": 10
        },
        "run": {
            "seed": 0,
            "seeds": [0, 1, 2, 3, 4],
            "out_dir": "runs/default",
            "log_level": "INFO"
        }
    }

    def __init__(self, config_file=None):
        """
        Initialize the configuration manager.

        Args:
            config_file (str): Path to a JSON configuration file, or None for defaults

        Raises:
            ConfigurationError: If the file is missing, malformed or has unknown keys
        """
        self.config_file = config_file
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        if config_file is not None:
            self.load_config()
        logger.debug(f"Configuration initialized from: {config_file or 'defaults'}")

    def get(self, section, key=None):
        """
        Get a configuration value.

        Args:
            section (str): Configuration section
            key (str): Configuration key (or None to get entire section)

        Returns:
            object: Configuration value or section dict
        """
        self._check_key(section, key)
        if key is None:
            return self.config[section]
        return self.config[section][key]

    def set(self, section, key, value):
        """
        Set a configuration value.

        Args:
            section (str): Configuration section
            key (str): Configuration key
            value (object): Configuration value
        """
        self._check_key(section, key)
        self.config[section][key] = value
        logger.debug(f"Set configuration {section}.{key} = {value}")

    def save_config(self, path=None):
        """
        Save the configuration to file.

        Args:
            path (str): Destination, defaults to the file the configuration was loaded from
        """
        path = path or self.config_file
        with open(path, "w") as f:
            json.dump(self.config, f, indent=4, sort_keys=True)
        logger.debug(f"Saved configuration to {path}")

    def load_config(self):
        """
        Load the configuration from file, overriding defaults key by key.

        Raises:
            ConfigurationError: If the file is missing, not JSON, or has unknown keys
        """
        if not os.path.exists(self.config_file):
            raise ConfigurationError(f"Configuration file not found: {self.config_file}")
        try:
            with open(self.config_file, "r") as f:
                loaded_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Configuration file {self.config_file} is not valid JSON: {e}") from e

        if not isinstance(loaded_config, dict):
            raise ConfigurationError("Configuration root must be a JSON object")
        for section, values in loaded_config.items():
            self._check_key(section)
            if not isinstance(values, dict):
                raise ConfigurationError(f"Section '{section}' must be a JSON object")
            for key, value in values.items():
                self._check_key(section, key)
                self.config[section][key] = value
        logger.debug(f"Loaded configuration from {self.config_file}")

    def reset_to_defaults(self):
        """Reset configuration to default values."""
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        logger.debug("Reset configuration to defaults")

    def _check_key(self, section, key=None):
        if section not in self.config:
            raise ConfigurationError(f"Unknown configuration section '{section}'")
        if key is not None and key not in self.config[section]:
            raise ConfigurationError(f"Unknown configuration key '{section}.{key}'")

    def to_run_config(self):
        """
        Build the validated, typed configuration.

        Returns:
            RunConfig: Typed configuration with every invariant checked
        """
        c = self.config
        try:
            augment = c["augment"]
            image_shape = augment["image_shape"]
            train = TrainConfig(
                epochs=int(c["train"]["epochs"]),
                batch_size=int(c["train"]["batch_size"]),
                base_lr=float(c["train"]["base_lr"]),
                final_lr=None if c["train"]["final_lr"] is None else float(c["train"]["final_lr"]),
                sgd_momentum=float(c["train"]["sgd_momentum"]),
                weight_decay=float(c["train"]["weight_decay"]),
                label_mode=str(c["train"]["label_mode"]),
                offline_cadence_epochs=int(c["train"]["offline_cadence_epochs"]),
                seed=int(c["run"]["seed"]),
                deterministic=bool(c["train"]["deterministic"]),
                omega=float(c["memory_bank"]["omega"]),
                num_clusters=None if c["clustering"]["k"] is None else int(c["clustering"]["k"]),
                kmeans_max_iters=int(c["clustering"]["kmeans_max_iters"]),
                kmeans_tol=float(c["clustering"]["kmeans_tol"]),
                hidden=tuple(int(h) for h in c["encoder"]["hidden"]),
                head_hidden=int(c["encoder"]["head_hidden"]),
                embedding_dim=int(c["encoder"]["embedding_dim"]),
                augmentation=AugmentConfig(
                    gaussian_noise_sigma=float(augment["gaussian_noise_sigma"]),
                    mask_fraction=float(augment["mask_fraction"]),
                    scale_jitter_range=tuple(float(s) for s in augment["scale_jitter_range"]),
                    crop_padding=int(augment["crop_padding"]),
                    flip_enabled=bool(augment["flip_enabled"]),
                    noise_sigma=float(augment["noise_sigma"]),
                    image_shape=None if image_shape is None else tuple(int(s) for s in image_shape),
                ),
                sampling=SamplingConfig(
                    strategy=str(c["sampling"]["strategy"]),
                    K=int(c["sampling"]["K"]),
                    pool_fraction=float(c["sampling"]["pool_fraction"]),
                ),
                loss=LossConfig(
                    tau=float(c["loss"]["tau"]),
                    m_intra=float(c["loss"]["m_intra"]),
                    m_inter=float(c["loss"]["m_inter"]),
                    lam=float(c["loss"]["lambda"]),
                ),
            )
            data = DataConfig(**c["data"])
            evaluation = EvalConfig(**c["eval"])
            return RunConfig(
                train=train,
                data=data,
                eval=evaluation,
                out_dir=str(c["run"]["out_dir"]),
                seeds=tuple(int(s) for s in c["run"]["seeds"]),
                log_level=str(c["run"]["log_level"]),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f"Invalid configuration value: {e}") from e
