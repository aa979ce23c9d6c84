"""Inference-time feature extraction and retrieval metrics.

At inference only part features and their predicted weightings survive;
predicted positions are dropped. Query-gallery distances use the part-based
metric; ranking quality is reported as a CMC curve (Rank-1 in particular)
and mAP under the usual same-identity-same-camera filtering protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import DipModel


class ConfigMismatchError(ValueError):
    """Checkpoint geometry does not match the supplied images."""


class NoValidMatchError(ValueError):
    """A query has no gallery match left after filtering."""


@dataclass
class GalleryIndex:
    """Per-image retrieval representation: features + weightings only."""

    dips: np.ndarray      # (n, M, D); M=1 holding the global feature when parts are off
    weights: np.ndarray   # (n, M)
    labels: np.ndarray    # (n,)
    cameras: np.ndarray   # (n,)
    feature_kind: str = "parts"   # "parts" or "cls"

    def __len__(self):
        return len(self.labels)


@dataclass
class RankingResult:
    distances: np.ndarray  # (Q, G)
    order: np.ndarray      # (Q, G) gallery indices, best first
    cmc: np.ndarray        # cumulative match curve, index 0 = Rank-1
    rank1: float
    map: float

    def to_json(self):
        return json.dumps({
            "rank1": round(float(self.rank1), 6),
            "map": round(float(self.map), 6),
            "cmc": [round(float(v), 6) for v in self.cmc],
        }, indent=2)


def extract(model: DipModel, images, labels, cameras, batch_size=64):
    """Run inference over images; no augmentation, deterministic."""
    cfg = model.config
    images = np.asarray(images)
    if images.shape[1:] != (cfg.H, cfg.W, cfg.C):
        raise ConfigMismatchError(
            f"images {images.shape[1:]} vs model ({cfg.H}, {cfg.W}, {cfg.C})"
        )
    dips, weights = [], []
    for lo in range(0, len(images), batch_size):
        out = model.forward(images[lo:lo + batch_size])
        if cfg.M > 0:
            dips.append(out.dip_features.data.copy())
            weights.append(out.pred_weights.data.copy())
        else:
            dips.append(out.f_cls.data[:, None, :].copy())
            weights.append(np.ones((out.f_cls.shape[0], 1), dtype=out.f_cls.dtype))
    return GalleryIndex(
        dips=np.concatenate(dips),
        weights=np.concatenate(weights),
        labels=np.asarray(labels, dtype=np.int64),
        cameras=np.asarray(cameras, dtype=np.int64),
        feature_kind="parts" if cfg.M > 0 else "cls",
    )


def distance_matrix(queries: GalleryIndex, gallery: GalleryIndex):
    """Exact (Q, G) part-based distances in float64."""
    if queries.dips.shape[1:] != gallery.dips.shape[1:]:
        raise ValueError(
            f"part dimensions differ: {queries.dips.shape[1:]} vs {gallery.dips.shape[1:]}"
        )
    qd = queries.dips.astype(np.float64)
    gd = gallery.dips.astype(np.float64)
    Q, M, _ = qd.shape
    G = gd.shape[0]
    d = np.empty((Q, G, M))
    for m in range(M):
        diff = qd[:, None, m, :] - gd[None, :, m, :]
        d[:, :, m] = np.sqrt((diff * diff).sum(axis=-1))
    wc = queries.weights.astype(np.float64)[:, None, :] * \
        gallery.weights.astype(np.float64)[None, :, :]
    e = np.exp(wc - wc.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return (s * d).sum(axis=-1)


def cmc_map(distmat, query_labels, query_cams, gallery_labels, gallery_cams,
            camera_filter=True, max_rank=None):
    """Ranking metrics under the standard filtering protocol.

    Gallery entries sharing both identity and camera with the query are
    excluded for that query; ties break toward the lower gallery index.
    """
    distmat = np.asarray(distmat)
    q_labels = np.asarray(query_labels)
    q_cams = np.asarray(query_cams)
    g_labels = np.asarray(gallery_labels)
    g_cams = np.asarray(gallery_cams)
    Q, G = distmat.shape
    if max_rank is None:
        max_rank = G

    order = np.argsort(distmat, axis=1, kind="stable")
    cmc_sum = np.zeros(max_rank)
    aps = []
    for q in range(Q):
        ranked = order[q]
        if camera_filter:
            junk = (g_labels[ranked] == q_labels[q]) & (g_cams[ranked] == q_cams[q])
            ranked = ranked[~junk]
        matches = g_labels[ranked] == q_labels[q]
        if not matches.any():
            raise NoValidMatchError(f"query {q} has no valid gallery match")
        first = int(np.flatnonzero(matches)[0])
        curve = np.zeros(max_rank)
        if first < max_rank:
            curve[first:] = 1.0
        cmc_sum += curve
        hits = np.flatnonzero(matches)
        precision_at_hit = (np.arange(len(hits)) + 1) / (hits + 1)
        aps.append(precision_at_hit.mean())
    cmc = cmc_sum / Q
    return RankingResult(
        distances=distmat,
        order=order,
        cmc=cmc,
        rank1=float(cmc[0]),
        map=float(np.mean(aps)),
    )


def evaluate_retrieval(model, query_images, query_labels, query_cams,
                       gallery_images, gallery_labels, gallery_cams,
                       camera_filter=True):
    """Extract both sides and rank; the one-call convenience wrapper."""
    q = extract(model, query_images, query_labels, query_cams)
    g = extract(model, gallery_images, gallery_labels, gallery_cams)
    dist = distance_matrix(q, g)
    return cmc_map(dist, q.labels, q.cameras, g.labels, g.cameras,
                   camera_filter=camera_filter)


def write_distance_csv(path, distmat):
    np.savetxt(path, np.asarray(distmat), delimiter=",", fmt="%.8f")
