"""Lossless image <-> latent codec standing in for a learned VAE.

``encode`` is a space-to-depth rearrangement with factor ``f`` followed by
the affine map ``(x - 0.5) * 2``; ``decode`` undoes both exactly.
"""
from __future__ import annotations

import dataclasses

import numpy as np

SCALE_FACTOR = 4


@dataclasses.dataclass
class LatentTensor:
    data: np.ndarray  # (C, h, w)
    scale_factor: int = SCALE_FACTOR

    @property
    def shape(self):
        return self.data.shape


def latent_channels(scale_factor: int = SCALE_FACTOR) -> int:
    return 3 * scale_factor * scale_factor


def encode(image: np.ndarray, scale_factor: int = SCALE_FACTOR) -> LatentTensor:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    height, width, _ = image.shape
    f = scale_factor
    if height % f or width % f:
        raise ValueError(f"image size {height}x{width} not divisible by {f}")
    x = image.reshape(height // f, f, width // f, f, 3)
    # channel index = (rgb, dy, dx)
    x = x.transpose(4, 1, 3, 0, 2).reshape(3 * f * f, height // f, width // f)
    return LatentTensor((x - 0.5) * 2.0, f)


def decode(z: LatentTensor) -> np.ndarray:
    data = np.asarray(z.data, dtype=np.float64)
    f = z.scale_factor
    channels, h, w = data.shape
    if channels != 3 * f * f:
        raise ValueError(f"latent has {channels} channels, expected {3 * f * f}")
    x = data.reshape(3, f, f, h, w).transpose(3, 1, 4, 2, 0).reshape(h * f, w * f, 3)
    return np.clip(x / 2.0 + 0.5, 0.0, 1.0)


def encode_batch(images: np.ndarray, scale_factor: int = SCALE_FACTOR) -> np.ndarray:
    """(B, H, W, 3) images -> (B, C, h, w) latent array."""
    return np.stack([encode(im, scale_factor).data for im in images])


def decode_batch(latents: np.ndarray, scale_factor: int = SCALE_FACTOR) -> np.ndarray:
    return np.stack([decode(LatentTensor(z, scale_factor)) for z in latents])
