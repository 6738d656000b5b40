"""
Augmentation Module for DeskCLR

Desk-scale view augmentations. Vector samples get additive noise, random
coordinate masking and a global scale jitter; image samples get
pad-and-random-crop, an optional horizontal flip and additive noise.

Every view is a deterministic function of (seed, instance, epoch, view index).
"""
import logging

import cv2
import numpy as np

from deskclr.configuration import AugmentConfig

logger = logging.getLogger(__name__)

AUGMENT_STREAM = 1


def view_rng(seed, instance, epoch, view=0):
    """Random stream dedicated to one augmented view."""
    return np.random.default_rng([int(seed), AUGMENT_STREAM, int(epoch), int(instance), int(view)])


def _augment_vector(x, cfg, rng):
    if cfg.gaussian_noise_sigma > 0:
        x = x + rng.normal(0.0, cfg.gaussian_noise_sigma, size=x.shape)
    n_masked = int(round(cfg.mask_fraction * x.shape[0]))
    if n_masked > 0:
        x = x.copy()
        x[rng.choice(x.shape[0], size=n_masked, replace=False)] = 0.0
    low, high = cfg.scale_jitter_range
    if low != high:
        x = x * rng.uniform(low, high)
    elif low != 1.0:
        x = x * low
    return x


def _augment_image(x, cfg, rng):
    height, width = cfg.image_shape
    img = x.reshape(height, width).astype(np.float32)
    pad = cfg.crop_padding
    if pad > 0:
        padded = cv2.copyMakeBorder(img, pad, pad, pad, pad, cv2.BORDER_CONSTANT, value=0)
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[dy:dy + height, dx:dx + width]
    if cfg.flip_enabled and rng.random() < 0.5:
        img = cv2.flip(img, 1)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return img.reshape(-1)


def augment(sample, cfg: AugmentConfig, rng):
    """
    Produce one augmented view of a sample.

    Args:
        sample (numpy.ndarray): Flat sample vector
        cfg (AugmentConfig): Augmentation knobs; all-off gives the identity
        rng (numpy.random.Generator): Stream from ``view_rng``

    Returns:
        numpy.ndarray: Augmented view with the sample's dtype and shape
    """
    sample = np.asarray(sample)
    if cfg.image_shape is not None:
        view = _augment_image(sample, cfg, rng)
    else:
        view = _augment_vector(sample, cfg, rng)
    return np.asarray(view, dtype=sample.dtype).reshape(sample.shape)


def augment_batch(samples, indices, cfg, seed, epoch, view=0):
    """Augment the given rows of ``samples`` once each, in index order."""
    return np.stack(
        [augment(samples[i], cfg, view_rng(seed, i, epoch, view)) for i in indices]
    ) if len(indices) else np.empty((0, samples.shape[1]), dtype=samples.dtype)
