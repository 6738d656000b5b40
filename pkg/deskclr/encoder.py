"""
Encoder Module for DeskCLR

A ReLU MLP backbone followed by a 2-layer projection head and L2
normalization, with exact hand-written forward and backward passes.

Every layer except the last head layer is followed by a ReLU. Weights are
stored as (fan_in, fan_out) so a layer computes ``h @ W + b``.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from deskclr.errors import ConfigurationError, DegenerateInputError

logger = logging.getLogger(__name__)

HEAD_LAYERS = 2


@dataclass
class EncoderParams:
    """Weights and biases of every layer, backbone first, head last."""

    layers: List[Tuple[np.ndarray, np.ndarray]]

    @property
    def dims(self):
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def backbone(self):
        return self.layers[:-HEAD_LAYERS]

    @property
    def head(self):
        return self.layers[-HEAD_LAYERS:]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    @property
    def embedding_dim(self):
        return self.layers[-1][0].shape[1]

    def copy(self):
        return EncoderParams([(w.copy(), b.copy()) for w, b in self.layers])

    def astype(self, dtype):
        return EncoderParams([(w.astype(dtype), b.astype(dtype)) for w, b in self.layers])

    def arrays(self):
        """Flat list [W0, b0, W1, b1, ...] of the underlying arrays."""
        return [a for layer in self.layers for a in layer]

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, consumed by ``backward``."""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    z: np.ndarray = None
    norms: np.ndarray = None
    embeddings: np.ndarray = None


def validate_dims(dims):
    """
    Check a layer-width chain.

    Raises:
        ConfigurationError: If the chain is too short, has non-positive widths, or D < 2
    """
    dims = [int(d) for d in dims]
    if len(dims) < HEAD_LAYERS + 2:
        raise ConfigurationError(
            f"Encoder needs at least one backbone layer and a {HEAD_LAYERS}-layer head, got dims {dims}"
        )
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"Encoder layer widths must be positive, got {dims}")
    if dims[-1] < 2:
        raise ConfigurationError(f"Embedding dimension must be >= 2, got {dims[-1]}")
    return dims


def init_params(dims, rng, dtype=np.float32):
    """
    He-normal weights, zero biases.

    Args:
        dims (list): Widths from input to embedding, e.g. [d_in, 128, 128, 64, 32]
        rng (numpy.random.Generator): Seeded random stream
        dtype (numpy.dtype): float32 for training, float64 for gradient checks

    Returns:
        EncoderParams: Fresh parameters
    """
    dims = validate_dims(dims)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weight = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((weight.astype(dtype), np.zeros(fan_out, dtype=dtype)))
    logger.debug(f"Initialized encoder with dims {dims}")
    return EncoderParams(layers)


def forward(params, batch):
    """
    Embed a batch onto the unit sphere.

    Args:
        params (EncoderParams): Encoder parameters
        batch (numpy.ndarray): (B, d_in) inputs

    Returns:
        tuple: (embeddings (B, D), ForwardCache)

    Raises:
        DegenerateInputError: If a pre-normalization output is the zero vector
    """
    h = np.asarray(batch, dtype=params.dtype)
    cache = ForwardCache()
    last = len(params.layers) - 1
    for i, (weight, bias) in enumerate(params.layers):
        cache.inputs.append(h)
        z = h @ weight + bias
        cache.pre_activations.append(z)
        h = np.maximum(z, 0) if i < last else z

    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError(
            f"Encoder produced {int(np.sum(norms == 0))} zero vectors, cannot normalize"
        )
    cache.z = h
    cache.norms = norms
    cache.embeddings = h / norms
    return cache.embeddings, cache


def backward(params, cache, grad_embeddings):
    """
    Backpropagate an embedding gradient to every parameter.

    The normalization step maps an upstream gradient u to (u - v (v . u)) / |z|,
    the projection onto the tangent plane at v = z / |z|.

    Args:
        params (EncoderParams): Parameters used in the forward pass
        cache (ForwardCache): Cache from that forward pass
        grad_embeddings (numpy.ndarray): (B, D) dLoss/dEmbeddings

    Returns:
        EncoderParams: Gradients with the same structure as ``params``
    """
    grad = np.asarray(grad_embeddings, dtype=params.dtype)
    if grad.shape != cache.embeddings.shape:
        raise ValueError(f"Gradient shape {grad.shape} does not match embeddings {cache.embeddings.shape}")

    v = cache.embeddings
    g = (grad - v * np.sum(v * grad, axis=1, keepdims=True)) / cache.norms

    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        weight, _ = params.layers[i]
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ weight.T) * (cache.pre_activations[i - 1] > 0)
    return EncoderParams(grads)


def embed(params, samples, chunk_size=1024):
    """Forward a whole dataset in chunks, keeping only the embeddings."""
    samples = np.asarray(samples)
    out = np.empty((samples.shape[0], params.embedding_dim), dtype=params.dtype)
    for start in range(0, samples.shape[0], chunk_size):
        out[start:start + chunk_size], _ = forward(params, samples[start:start + chunk_size])
    return out
