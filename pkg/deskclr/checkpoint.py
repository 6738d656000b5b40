"""
Checkpoint Module for DeskCLR

Binary persistence of a training run: encoder parameters, the memory bank and
the clustering state, each as a little-endian segment behind a top-level
header. Files are replaced atomically so an aborted run keeps the last good
checkpoint.
"""
import io
import os
import struct
import logging

import numpy as np

from deskclr.clustering import ClusterState
from deskclr.encoder import EncoderParams
from deskclr.errors import FormatError
from deskclr.memory_bank import MemoryBank

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ICKP"
CHECKPOINT_VERSION = 1
BANK_MAGIC = b"ICLR"
BANK_VERSION = 1

_TOP_HEADER = struct.Struct("<4sHI")
_BANK_HEADER = struct.Struct("<4sHQI")
_U32 = struct.Struct("<I")
_LAYER_DIMS = struct.Struct("<II")

SEGMENT_COUNT = 3


class _Reader:
    """Sequential reader that turns short reads into FormatError."""

    def __init__(self, raw, source):
        self.raw = raw
        self.offset = 0
        self.source = source

    def take(self, size):
        if self.offset + size > len(self.raw):
            raise FormatError(f"Checkpoint {self.source} is truncated at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return fmt.unpack(self.take(fmt.size))

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)


def write_encoder_segment(out, params):
    out.write(_U32.pack(len(params.layers)))
    for weight, _ in params.layers:
        out.write(_LAYER_DIMS.pack(*weight.shape))
    for weight, bias in params.layers:
        out.write(weight.astype("<f4").tobytes(order="C"))
        out.write(bias.astype("<f4").tobytes())


def read_encoder_segment(reader):
    (layer_count,) = reader.unpack(_U32)
    shapes = [reader.unpack(_LAYER_DIMS) for _ in range(layer_count)]
    layers = []
    for fan_in, fan_out in shapes:
        weight = reader.array("<f4", fan_in * fan_out).reshape(fan_in, fan_out)
        bias = reader.array("<f4", fan_out)
        layers.append((weight.astype(np.float32), bias.astype(np.float32)))
    return EncoderParams(layers)


def write_bank_segment(out, bank):
    out.write(_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.count, bank.dim))
    out.write(bank.features.astype("<f4").tobytes(order="C"))


def read_bank_segment(reader, omega):
    magic, version, count, dim = reader.unpack(_BANK_HEADER)
    if magic != BANK_MAGIC:
        raise FormatError(f"Bad memory bank magic {magic!r} in {reader.source}")
    if version != BANK_VERSION:
        raise FormatError(f"Unsupported memory bank version {version} in {reader.source}")
    features = reader.array("<f4", count * dim).reshape(count, dim)
    return MemoryBank(features.astype(np.float64), omega)


def write_cluster_segment(out, state):
    out.write(_U32.pack(state.k))
    out.write(state.labels.astype("<u4").tobytes())
    out.write(state.centroids.astype("<f4").tobytes(order="C"))
    out.write(state.counts.astype("<u8").tobytes())


def read_cluster_segment(reader, bank):
    (k,) = reader.unpack(_U32)
    labels = reader.array("<u4", bank.count).astype(np.int64)
    centroids = reader.array("<f4", k * bank.dim).reshape(k, bank.dim).astype(np.float32)
    counts = reader.array("<u8", k).astype(np.int64)
    if labels.size and labels.max() >= k:
        raise FormatError(f"Cluster labels exceed k={k} in {reader.source}")
    if not np.array_equal(np.bincount(labels, minlength=k), counts):
        raise FormatError(f"Cluster counts disagree with labels in {reader.source}")
    state = ClusterState.from_labels(labels, bank.features, k)
    filled = counts > 0
    state.centroids[~filled] = centroids[~filled]
    drift = float(np.abs(state.centroids[filled] - centroids[filled]).max()) if filled.any() else 0.0
    logger.debug(f"Rebuilt {k} cluster sums from bank rows, centroid drift {drift:.2e}")
    return state


def save_checkpoint(path, params, bank, state):
    """
    Save encoder, bank and clustering to one file.

    Args:
        path (str): Destination file
        params (EncoderParams): Encoder parameters
        bank (MemoryBank): Memory bank
        state (ClusterState): Clustering state
    """
    buffer = io.BytesIO()
    buffer.write(_TOP_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, SEGMENT_COUNT))
    write_encoder_segment(buffer, params)
    write_bank_segment(buffer, bank)
    write_cluster_segment(buffer, state)

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(buffer.getvalue())
    os.replace(tmp_path, path)
    logger.debug(f"Saved checkpoint to {path}")


def load_checkpoint(path, omega=0.5):
    """
    Load a checkpoint written by ``save_checkpoint``.

    Args:
        path (str): Checkpoint file
        omega (float): Momentum coefficient for the restored bank

    Returns:
        tuple: (EncoderParams, MemoryBank, ClusterState)

    Raises:
        FormatError: On a bad magic number, version or truncation
    """
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    magic, version, segments = reader.unpack(_TOP_HEADER)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad checkpoint magic {magic!r} in {path}")
    if version != CHECKPOINT_VERSION or segments != SEGMENT_COUNT:
        raise FormatError(f"Unsupported checkpoint layout (version {version}, {segments} segments) in {path}")
    params = read_encoder_segment(reader)
    bank = read_bank_segment(reader, omega)
    state = read_cluster_segment(reader, bank)
    logger.debug(f"Loaded checkpoint from {path}: {bank.count} instances, {state.k} clusters")
    return params, bank, state
