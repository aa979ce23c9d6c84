"""Affine transforms over images and normalized positions.

A transform is a 3x3 homogeneous matrix composed of translation, scaling
about the image center, and optional horizontal flip. The first coordinate
runs down the vertical (row) axis to match the patch-grid convention, so a
horizontal flip reflects the second coordinate. Images are warped by inverse
mapping with bilinear interpolation and zero fill.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SingularTransformError(ValueError):
    """Raised when a transform matrix cannot be inverted."""


@dataclass
class AffineConfig:
    """Sampling ranges for the transformed-image branch."""

    translate: float = 0.12      # +/- fraction of the side length
    scale_min: float = 0.9
    scale_max: float = 1.1
    hflip_prob: float = 0.5


def make_affine(tx=0.0, ty=0.0, scale=1.0, hflip=False):
    """Compose flip o scale o translate about the center (0.5, 0.5)."""
    T = np.array([[1.0, 0.0, tx],
                  [0.0, 1.0, ty],
                  [0.0, 0.0, 1.0]])
    S = np.array([[scale, 0.0, (1.0 - scale) * 0.5],
                  [0.0, scale, (1.0 - scale) * 0.5],
                  [0.0, 0.0, 1.0]])
    K = S @ T
    if hflip:
        F = np.array([[1.0, 0.0, 0.0],
                      [0.0, -1.0, 1.0],
                      [0.0, 0.0, 1.0]])
        K = F @ K
    return K


def sample_affine(rng, config: AffineConfig):
    """Draw one transform; reproducible for a seeded generator."""
    tx = rng.uniform(-config.translate, config.translate)
    ty = rng.uniform(-config.translate, config.translate)
    scale = rng.uniform(config.scale_min, config.scale_max)
    hflip = rng.random() < config.hflip_prob
    return make_affine(tx, ty, scale, hflip)


def transform_position(p, K):
    """Homogeneous multiply [p'; 1] = K [p; 1] for (..., 2) positions."""
    p = np.asarray(p, dtype=np.float64)
    hom = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    out = hom @ K.T
    return out[..., :2]


def invert(K):
    det = np.linalg.det(K)
    if abs(det) < 1e-12:
        raise SingularTransformError("affine matrix is singular")
    return np.linalg.inv(K)


def transform_image(image, K):
    """Inverse-warp an (H, W, C) image under K with bilinear sampling.

    A pixel center (r, c) sits at normalized ((r+0.5)/H, (c+0.5)/W); source
    locations outside the frame contribute zero.
    """
    img = np.asarray(image)
    H, W = img.shape[0], img.shape[1]
    if np.array_equal(K, np.eye(3)):
        return img.copy()
    Kinv = invert(K)

    r = (np.arange(H) + 0.5) / H
    c = (np.arange(W) + 0.5) / W
    gx, gy = np.meshgrid(r, c, indexing="ij")
    dest = np.stack([gx, gy], axis=-1)
    src = transform_position(dest.reshape(-1, 2), Kinv).reshape(H, W, 2)

    sr = src[..., 0] * H - 0.5
    sc = src[..., 1] * W - 0.5
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0

    out = np.zeros_like(img, dtype=np.float64)
    for dr in (0, 1):
        for dc in (0, 1):
            rr = r0 + dr
            cc = c0 + dc
            inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            wgt = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
            wgt = np.where(inside, wgt, 0.0)
            vals = img[np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)]
            out += wgt[..., None] * vals * inside[..., None]
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
