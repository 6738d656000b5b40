"""
Dataset Module for DeskCLR

Desk-scale data sources: a planted Gaussian-mixture generator, a reader and
writer for the IDX binary image format, a stratified train/test split, and a
compact binary file format (plus JSON sidecar) for saved datasets.
"""
import json
import os
import struct
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from deskclr.errors import ConfigurationError, FormatError, SplitError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATASET_MAGIC = b"ICDS"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHQIB")


@dataclass
class Dataset:
    """
    Samples with optional ground-truth labels.

    The labels exist for evaluation only; the trainer is handed ``samples``
    and nothing else.
    """

    samples: np.ndarray
    true_labels: Optional[np.ndarray] = None
    class_count: int = 0
    image_shape: Optional[Tuple[int, int]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
            if self.true_labels.shape[0] != self.samples.shape[0]:
                raise FormatError(
                    f"{self.true_labels.shape[0]} labels for {self.samples.shape[0]} samples"
                )
            if self.true_labels.size and (
                self.true_labels.min() < 0 or self.true_labels.max() >= self.class_count
            ):
                raise FormatError(f"Labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            samples=self.samples[indices],
            true_labels=None if self.true_labels is None else self.true_labels[indices],
            class_count=self.class_count,
            image_shape=self.image_shape,
            params=dict(self.params),
        )


def gen_gaussian_mixture(classes, per_class, dim, center_separation, within_std, rng):
    """
    Sample a planted mixture of isotropic Gaussians.

    Class centers are uniform on the sphere of radius ``center_separation``.

    Args:
        classes (int): Number of mixture components (>= 2)
        per_class (int): Samples per component
        dim (int): Ambient dimension (>= 2)
        center_separation (float): Radius of the center sphere
        within_std (float): Per-coordinate standard deviation inside a class
        rng (numpy.random.Generator): Seeded random stream

    Returns:
        Dataset: Shuffled samples with their component labels
    """
    if classes < 2 or dim < 2 or per_class < 1:
        raise ConfigurationError(
            f"Gaussian mixture needs classes >= 2, dim >= 2, per_class >= 1; got {classes}, {dim}, {per_class}"
        )
    if within_std < 0 or center_separation < 0:
        raise ConfigurationError("Gaussian mixture spreads must be non-negative")

    directions = rng.standard_normal((classes, dim))
    centers = center_separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    samples = centers[labels] + within_std * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    logger.info(f"Generated Gaussian mixture: {classes} classes x {per_class} samples in {dim} dimensions")
    return Dataset(
        samples=samples[order],
        true_labels=labels[order],
        class_count=classes,
        params={
            "kind": "gaussian",
            "classes": classes,
            "per_class": per_class,
            "dim": dim,
            "center_separation": center_separation,
            "within_std": within_std,
        },
    )


def _read_exact(path):
    with open(path, "rb") as f:
        return f.read()


def load_idx(images_path, labels_path=None):
    """
    Read an IDX image file (and optionally its label file).

    Pixels are scaled to [0, 1] and each image flattened row-major.

    Raises:
        FormatError: On a bad magic number, truncation, or count mismatch
    """
    raw = _read_exact(images_path)
    if len(raw) < 16:
        raise FormatError(f"IDX image file {images_path} is truncated (header)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"Bad IDX image magic 0x{magic:08x} in {images_path}")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise FormatError(f"IDX image file {images_path} is truncated: {len(raw)} of {expected} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    samples = pixels.reshape(count, rows * cols).astype(np.float32) / np.float32(255.0)

    labels = None
    class_count = 0
    if labels_path is not None:
        raw = _read_exact(labels_path)
        if len(raw) < 8:
            raise FormatError(f"IDX label file {labels_path} is truncated (header)")
        magic, label_count = struct.unpack(">II", raw[:8])
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"Bad IDX label magic 0x{magic:08x} in {labels_path}")
        if len(raw) < 8 + label_count:
            raise FormatError(f"IDX label file {labels_path} is truncated")
        if label_count != count:
            raise FormatError(f"{count} images but {label_count} labels")
        labels = np.frombuffer(raw, dtype=np.uint8, count=label_count, offset=8).astype(np.int64)
        class_count = int(labels.max()) + 1 if labels.size else 0

    logger.info(f"Loaded {count} IDX images of {rows}x{cols} from {images_path}")
    return Dataset(
        samples=samples,
        true_labels=labels,
        class_count=class_count,
        image_shape=(rows, cols),
        params={"kind": "idx", "images_path": str(images_path), "labels_path": labels_path and str(labels_path)},
    )


def write_idx(images, images_path, labels=None, labels_path=None):
    """
    Write uint8 images (N, H, W) and optional labels in IDX format.
    """
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(images.tobytes(order="C"))
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
            f.write(labels.tobytes())


def _split_counts(size, test_fraction):
    return min(max(int(round(test_fraction * size)), 1), size - 1)


def split(dataset, test_fraction, rng):
    """
    Disjoint, exhaustive train/test split.

    Stratified by true label when labels exist (each class contributes
    round(test_fraction * size) test samples, at least one to each side),
    uniform otherwise. Both parts keep the original sample order.

    Returns:
        tuple: (train Dataset, test Dataset)

    Raises:
        SplitError: If a class (or the whole unlabeled set) has fewer than 2 members
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if dataset.true_labels is not None:
        groups = [np.flatnonzero(dataset.true_labels == c) for c in np.unique(dataset.true_labels)]
    else:
        groups = [np.arange(len(dataset))]

    test_parts = []
    for members in groups:
        if members.size < 2:
            raise SplitError(f"Cannot split a group of {members.size} sample(s)")
        shuffled = rng.permutation(members)
        test_parts.append(shuffled[:_split_counts(members.size, test_fraction)])

    is_test = np.zeros(len(dataset), dtype=bool)
    is_test[np.concatenate(test_parts)] = True
    logger.debug(f"Split {len(dataset)} samples into {int((~is_test).sum())} train / {int(is_test.sum())} test")
    return dataset.subset(np.flatnonzero(~is_test)), dataset.subset(np.flatnonzero(is_test))


def sidecar_path(path):
    return f"{path}.json"


def save_dataset(dataset, path):
    """
    Write a dataset as little-endian float32 rows plus a JSON sidecar.

    Args:
        dataset (Dataset): Dataset to store
        path (str): Destination of the binary file; the sidecar goes to ``path + '.json'``
    """
    has_labels = dataset.true_labels is not None
    with open(path, "wb") as f:
        f.write(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset), dataset.dim, int(has_labels)))
        f.write(dataset.samples.astype("<f4").tobytes(order="C"))
        if has_labels:
            f.write(dataset.true_labels.astype("<u4").tobytes())
    sidecar = {
        "class_count": dataset.class_count,
        "image_shape": list(dataset.image_shape) if dataset.image_shape else None,
        "params": dataset.params,
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=4, sort_keys=True)
    logger.debug(f"Saved {len(dataset)} samples to {path}")


def load_dataset(path):
    """
    Read a dataset written by ``save_dataset``.

    Raises:
        FormatError: On a bad magic number or truncated payload
    """
    raw = _read_exact(path)
    if len(raw) < _DATASET_HEADER.size:
        raise FormatError(f"Dataset file {path} is truncated (header)")
    magic, version, count, dim, has_labels = _DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"Bad dataset magic {magic!r} in {path}")
    if version != DATASET_VERSION:
        raise FormatError(f"Unsupported dataset version {version} in {path}")
    expected = _DATASET_HEADER.size + 4 * count * dim + (4 * count if has_labels else 0)
    if len(raw) < expected:
        raise FormatError(f"Dataset file {path} is truncated: {len(raw)} of {expected} bytes")

    offset = _DATASET_HEADER.size
    samples = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=count, offset=offset + 4 * count * dim)

    sidecar = {}
    if os.path.exists(sidecar_path(path)):
        with open(sidecar_path(path), "r") as f:
            sidecar = json.load(f)
    class_count = sidecar.get("class_count")
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels is not None and labels.size else 0
    image_shape = sidecar.get("image_shape")
    return Dataset(
        samples=samples.astype(np.float32),
        true_labels=None if labels is None else labels.astype(np.int64),
        class_count=int(class_count),
        image_shape=tuple(image_shape) if image_shape else None,
        params=sidecar.get("params", {}),
    )
