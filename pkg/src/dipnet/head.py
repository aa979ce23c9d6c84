"""Shared prediction head: part feature -> (position, weighting).

One 3-layer MLP (widths D -> D -> D -> 3, GELU between layers, sigmoid on
the output) is applied to every part feature. The first two outputs are the
predicted normalized position, the third the part weighting; all three lie
strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import _trunc_normal


@dataclass
class DiPPrediction:
    """Predicted position and weighting of one part, each in (0, 1)."""

    p_x: float
    p_y: float
    w: float


def init_head_params(D, rng):
    def tn(shape):
        return Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return {
        "head_w1": tn((D, D)),
        "head_b1": zeros((D,)),
        "head_w2": tn((D, D)),
        "head_b2": zeros((D,)),
        "head_w3": tn((D, 3)),
        "head_b3": zeros((3,)),
    }


def predict_batch(dip_features, params):
    """(B, M, D) part features -> positions (B, M, 2) and weights (B, M)."""
    h = ad.gelu(ad.matmul(dip_features, params["head_w1"]) + params["head_b1"])
    h = ad.gelu(ad.matmul(h, params["head_w2"]) + params["head_b2"])
    out = ad.sigmoid(ad.matmul(h, params["head_w3"]) + params["head_b3"])
    B, M, _ = out.shape
    positions = out[:, :, 0:2]
    weights = ad.reshape(out[:, :, 2:3], (B, M))
    return positions, weights


def predict(dip_features, params):
    """(M, D) part features -> list of per-part predictions."""
    feats = dip_features if isinstance(dip_features, Tensor) else Tensor(dip_features)
    M, D = feats.shape
    pos, w = predict_batch(ad.reshape(feats, (1, M, D)), params)
    return [
        DiPPrediction(float(pos.data[0, k, 0]), float(pos.data[0, k, 1]),
                      float(w.data[0, k]))
        for k in range(M)
    ]
