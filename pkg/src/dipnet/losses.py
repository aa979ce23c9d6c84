"""Training objectives: identity loss, part-based triplet loss, position loss.

The identity feature is the weighting-scaled sum of part features. Image
distances combine per-part Euclidean distances with softmax-normalized
products of the two images' weightings; batch-hard triplet mining runs on
that distance. Position predictions regress toward the constructed implicit
positions (held constant) on both the original and transformed branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_SQ_FLOOR = 1e-20  # keeps sqrt gradients finite at zero part distance


class DegenerateBatchError(ValueError):
    """Raised when an anchor has no positive or no negative in the batch."""


@dataclass
class DiPSet:
    """Per-image part representation used by losses and retrieval."""

    dips: np.ndarray            # (M, D)
    weights: np.ndarray         # (M,), each in (0, 1)
    pred_positions: np.ndarray = None   # (M, 2)
    target_positions: np.ndarray = None  # (M, 2)


@dataclass
class LossCoefficients:
    lambda_id: float = 1.0
    lambda_t: float = 1.0
    lambda_pe: float = 1.0
    margin: float = 0.3


@dataclass
class LossBreakdown:
    """Scalar loss terms (id covers both branches when X' is present)."""

    id_loss: float
    triplet_loss: float
    pe_loss: float
    pe_loss_transformed: float
    total: float
    coefficients: LossCoefficients
    total_tensor: Tensor = field(default=None, repr=False)

    def to_dict(self):
        return {
            "id_loss": self.id_loss,
            "triplet_loss": self.triplet_loss,
            "pe_loss": self.pe_loss,
            "pe_loss_transformed": self.pe_loss_transformed,
            "total": self.total,
        }


def weighted_dip_feature(dip_set):
    """Raw-weight sum of part features; no normalization of the weights."""
    if isinstance(dip_set, DiPSet):
        dips, weights = Tensor(dip_set.dips), Tensor(dip_set.weights)
    else:
        dips, weights = dip_set
    M, D = dips.shape
    w = ad.broadcast_to(ad.reshape(weights, (M, 1)), (M, D))
    return ad.sum_(w * dips, axis=0)


def weighted_dip_feature_batch(dips, weights):
    """(B, M, D) x (B, M) -> (B, D)."""
    B, M, D = dips.shape
    w = ad.broadcast_to(ad.reshape(weights, (B, M, 1)), (B, M, D))
    return ad.sum_(w * dips, axis=1)


def id_logits(features, params):
    return ad.matmul(features, params["cls_w"]) + params["cls_b"]


def id_loss(feature, label, params):
    """Cross-entropy of one feature against its identity index."""
    f = feature if isinstance(feature, Tensor) else Tensor(feature)
    logits = id_logits(ad.reshape(f, (1,) + f.shape), params)
    return ad.cross_entropy(logits, np.array([label]))


def id_loss_batch(features, labels, params):
    return ad.cross_entropy(id_logits(features, params), labels)


def part_distance(set1: DiPSet, set2: DiPSet):
    """Exact scalar distance between two part sets (inference/oracle path)."""
    if set1.dips.shape != set2.dips.shape:
        raise ValueError("part sets differ in shape")
    d = np.linalg.norm(
        np.asarray(set1.dips, dtype=np.float64) - np.asarray(set2.dips, dtype=np.float64),
        axis=1,
    )
    wc = np.asarray(set1.weights, dtype=np.float64) * np.asarray(set2.weights, dtype=np.float64)
    e = np.exp(wc - wc.max())
    return float(np.sum(e / e.sum() * d))


def pairwise_part_distances(dips, weights, use_weighting=True):
    """Differentiable (B, B) matrix of part-based distances.

    ``dips`` is (B, M, D) and ``weights`` (B, M). Disabling the weighting
    replaces the combined weights with a constant, which the softmax turns
    into a uniform average over parts.
    """
    B, M, D = dips.shape
    per_part = ad.transpose(dips, (1, 0, 2))  # (M, B, D)
    dot = ad.matmul(per_part, ad.transpose(per_part, (0, 2, 1)))  # (M, B, B)
    sqn = ad.reshape(ad.sum_(per_part * per_part, axis=2), (M, B, 1))
    sq = ad.relu(
        ad.broadcast_to(sqn, (M, B, B))
        + ad.broadcast_to(ad.reshape(sqn, (M, 1, B)), (M, B, B))
        - 2.0 * dot
    )
    d = ad.sqrt(sq + _SQ_FLOOR)
    if use_weighting:
        wt = ad.transpose(weights, (1, 0))  # (M, B)
        wc = ad.broadcast_to(ad.reshape(wt, (M, B, 1)), (M, B, B)) * ad.broadcast_to(
            ad.reshape(wt, (M, 1, B)), (M, B, B)
        )
        s = ad.softmax(wc, axis=0)
        return ad.sum_(s * d, axis=0)
    return ad.mean_(d, axis=0)


def pairwise_euclidean(features):
    """Differentiable (B, B) Euclidean distances between (B, D) features."""
    dot = ad.matmul(features, ad.transpose(features, (1, 0)))
    B = features.shape[0]
    sqn = ad.reshape(ad.sum_(features * features, axis=1), (B, 1))
    sq = ad.relu(
        ad.broadcast_to(sqn, (B, B))
        + ad.broadcast_to(ad.reshape(sqn, (1, B)), (B, B))
        - 2.0 * dot
    )
    return ad.sqrt(sq + _SQ_FLOOR)


def batch_hard_indices(distances, labels):
    """Hardest positive / negative per anchor on a precomputed matrix.

    Positive: farthest same-label entry other than the anchor itself.
    Negative: nearest different-label entry. Ties resolve to the lowest
    index. Raises :class:`DegenerateBatchError` when either side is empty.
    """
    dist = np.asarray(distances)
    labels = np.asarray(labels)
    B = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~pos_mask.any(axis=1))[0])
        raise DegenerateBatchError(f"anchor {bad} has no positive in the batch")
    if not neg_mask.any(axis=1).all():
        bad = int(np.flatnonzero(~neg_mask.any(axis=1))[0])
        raise DegenerateBatchError(f"anchor {bad} has no negative in the batch")
    pos_idx = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg_idx = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    return pos_idx, neg_idx


def triplet_from_distances(distances, labels, margin):
    """Mean hinge over anchors given a differentiable distance matrix."""
    pos_idx, neg_idx = batch_hard_indices(distances.data, labels)
    d_pos = ad.take_per_row(distances, pos_idx)
    d_neg = ad.take_per_row(distances, neg_idx)
    return ad.mean_(ad.relu(d_pos - d_neg + margin))


def triplet_loss_batch(sets, labels, margin=0.3, use_weighting=True):
    """Batch-hard triplet loss over a list of :class:`DiPSet`."""
    dips = Tensor(np.stack([np.asarray(s.dips) for s in sets]))
    weights = Tensor(np.stack([np.asarray(s.weights) for s in sets]))
    dist = pairwise_part_distances(dips, weights, use_weighting=use_weighting)
    return triplet_from_distances(dist, labels, margin)


def pe_loss(targets, predictions):
    """Mean squared position error: (1/M) sum ||p - phat||^2."""
    t = targets if isinstance(targets, Tensor) else Tensor(targets)
    p = predictions if isinstance(predictions, Tensor) else Tensor(predictions)
    if t.shape != p.shape:
        raise ad.ShapeMismatchError(
            f"pe_loss: target shape {t.shape} != prediction shape {p.shape}"
        )
    diff = t - p
    per_part = ad.sum_(diff * diff, axis=-1)  # squared L2 per part
    return ad.mean_(per_part)


def total_loss(out_x, labels, params, coeffs: LossCoefficients,
               out_xp=None, targets_xp=None, use_weighting=True):
    """Combine all enabled terms for one step; see LossBreakdown invariant.

    ``out_x``/``out_xp`` are model BatchOutputs for the original and
    transformed branches; ``targets_xp`` holds the transformed implicit
    positions as constants. Implicit-position targets never carry gradient.
    """
    M = out_x.dip_features.shape[1]
    use_parts = M > 0
    labels = np.asarray(labels)

    if use_parts:
        w_x = out_x.pred_weights if use_weighting else Tensor(np.ones(out_x.pred_weights.shape))
        feat_x = weighted_dip_feature_batch(out_x.dip_features, w_x)
    else:
        feat_x = out_x.f_cls
    id_term = id_loss_batch(feat_x, labels, params)

    pe_term = None
    if use_parts and coeffs.lambda_pe != 0.0:
        pe_term = pe_loss(ad.detach(out_x.impl_positions), out_x.pred_positions)

    pe_term_xp = None
    if out_xp is not None:
        if use_parts:
            w_xp = out_xp.pred_weights if use_weighting else Tensor(np.ones(out_xp.pred_weights.shape))
            feat_xp = weighted_dip_feature_batch(out_xp.dip_features, w_xp)
        else:
            feat_xp = out_xp.f_cls
        id_term = id_term + id_loss_batch(feat_xp, labels, params)
        if use_parts and coeffs.lambda_pe != 0.0:
            if targets_xp is None:
                raise ValueError("transformed branch requires targets_xp")
            pe_term_xp = pe_loss(Tensor(np.asarray(targets_xp)), out_xp.pred_positions)

    # triplet over the union batch; transformed samples are independent
    if out_xp is not None:
        union_labels = np.concatenate([labels, labels])
        if use_parts:
            dips_u = ad.concat([out_x.dip_features, out_xp.dip_features], axis=0)
            w_u = ad.concat([w_x, w_xp], axis=0)
            dist = pairwise_part_distances(dips_u, w_u, use_weighting=use_weighting)
        else:
            dist = pairwise_euclidean(ad.concat([out_x.f_cls, out_xp.f_cls], axis=0))
    else:
        union_labels = labels
        if use_parts:
            dist = pairwise_part_distances(out_x.dip_features, w_x, use_weighting=use_weighting)
        else:
            dist = pairwise_euclidean(out_x.f_cls)
    triplet_term = triplet_from_distances(dist, union_labels, coeffs.margin)

    total = coeffs.lambda_id * id_term + coeffs.lambda_t * triplet_term
    if pe_term is not None:
        pe_sum = pe_term if pe_term_xp is None else pe_term + pe_term_xp
        total = total + coeffs.lambda_pe * pe_sum

    return LossBreakdown(
        id_loss=float(id_term.data),
        triplet_loss=float(triplet_term.data),
        pe_loss=float(pe_term.data) if pe_term is not None else 0.0,
        pe_loss_transformed=float(pe_term_xp.data) if pe_term_xp is not None else 0.0,
        total=float(total.data),
        coefficients=coeffs,
        total_tensor=total,
    )
