"""Tests for retrieval extraction, distances, and ranking metrics.

The CMC/mAP oracle below is an independent scalar-loop implementation,
written against the protocol definition before the production code; the
fixtures freeze its outputs.
"""

import numpy as np
import pytest

from dipnet import evaluate as ev
from dipnet import losses as ls
from dipnet.encoder import PatchConfig
from dipnet.evaluate import GalleryIndex
from dipnet.model import DipModel


def oracle_metrics(distmat, q_labels, q_cams, g_labels, g_cams, camera_filter=True):
    """Brute-force protocol: per query, sort, filter, walk the ranking."""
    Q, G = distmat.shape
    cmc = np.zeros(G)
    aps = []
    for q in range(Q):
        entries = sorted(range(G), key=lambda g: (distmat[q, g], g))
        kept = []
        for g in entries:
            if camera_filter and g_labels[g] == q_labels[q] and g_cams[g] == q_cams[q]:
                continue
            kept.append(g)
        good_seen = 0
        precisions = []
        first = None
        for rank, g in enumerate(kept):
            if g_labels[g] == q_labels[q]:
                if first is None:
                    first = rank
                good_seen += 1
                precisions.append(good_seen / (rank + 1))
        assert precisions, "oracle: query without a match"
        for r in range(first, G):
            cmc[r] += 1
        aps.append(float(np.mean(precisions)))
    return cmc / Q, float(np.mean(aps))


def make_index(rng, n, M=2, D=4, labels=None, cams=None):
    return GalleryIndex(
        dips=rng.normal(size=(n, M, D)),
        weights=rng.uniform(0.1, 0.9, size=(n, M)),
        labels=np.array(labels if labels is not None else rng.integers(0, 3, n)),
        cameras=np.array(cams if cams is not None else np.zeros(n, dtype=int)),
    )


def test_distance_matrix_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    q = make_index(rng, 3)
    g = make_index(rng, 5)
    dist = ev.distance_matrix(q, g)
    for i in range(3):
        for j in range(5):
            want = ls.part_distance(
                ls.DiPSet(q.dips[i], q.weights[i]),
                ls.DiPSet(g.dips[j], g.weights[j]),
            )
            assert dist[i, j] == pytest.approx(want, abs=1e-6)


def test_distance_matrix_symmetry_and_self_zero():
    rng = np.random.default_rng(1)
    a = make_index(rng, 4)
    d_ab = ev.distance_matrix(a, a)
    np.testing.assert_allclose(d_ab, d_ab.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(d_ab), 0.0, atol=1e-12)
    assert (d_ab.argmin(axis=1) == np.arange(4)).all()


def test_distance_matrix_dimension_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        ev.distance_matrix(make_index(rng, 2, M=2), make_index(rng, 2, M=3))


def test_cmc_map_perfect_ranking():
    dist = np.array([[0.1, 0.2, 0.9, 0.8],
                     [0.3, 0.1, 0.9, 0.8]])
    res = ev.cmc_map(dist, [0, 1], [0, 0], [0, 1, 2, 3], [1, 1, 1, 1])
    assert res.rank1 == 1.0
    assert res.map == 1.0
    assert (np.diff(res.cmc) >= 0).all()


def test_ap_hand_case_positives_at_ranks_1_and_3():
    dist = np.array([[0.1, 0.2, 0.3, 0.4]])
    res = ev.cmc_map(dist, [0], [0], [0, 1, 0, 1], [1, 1, 1, 1])
    assert res.map == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-12)
    assert res.rank1 == 1.0


def test_cmc_map_matches_oracle_on_random_fixture():
    rng = np.random.default_rng(3)
    Q, G = 5, 20
    dist = rng.random((Q, G))
    q_labels = rng.integers(0, 4, Q)
    g_labels = np.concatenate([np.arange(4), rng.integers(0, 4, G - 4)])
    q_cams = rng.integers(0, 2, Q)
    g_cams = rng.integers(0, 2, G)
    # bit-exact agreement with the loop oracle
    res = ev.cmc_map(dist, q_labels, q_cams, g_labels, g_cams)
    want_cmc, want_map = oracle_metrics(dist, q_labels, q_cams, g_labels, g_cams)
    np.testing.assert_array_equal(res.cmc, want_cmc)
    assert res.map == want_map


def test_cmc_map_tie_break_by_gallery_index():
    dist = np.array([[0.5, 0.5, 0.5]])
    res = ev.cmc_map(dist, [1], [0], [0, 1, 1], [1, 1, 1], camera_filter=False)
    # all tied; index order puts the wrong entry first, the match second
    assert res.cmc[0] == 0.0
    assert res.cmc[1] == 1.0
    np.testing.assert_array_equal(res.order[0], [0, 1, 2])


def test_camera_filter_excludes_same_camera_clone():
    # gallery 0 is the query itself (same id, same camera): filtered out,
    # leaving no valid match at all
    with pytest.raises(ev.NoValidMatchError):
        ev.cmc_map(np.array([[0.0, 0.4]]), [0], [0], [0, 1], [0, 1])
    # with a true cross-camera match present the clone is never counted
    dist = np.array([[0.0, 0.4, 0.6]])
    res = ev.cmc_map(dist, [0], [0], [0, 1, 0], [0, 1, 1])
    assert res.rank1 == 0.0 and res.cmc[1] == 1.0
    res_nf = ev.cmc_map(dist, [0], [0], [0, 1, 0], [0, 1, 1], camera_filter=False)
    assert res_nf.rank1 == 1.0


def test_no_valid_match_error():
    with pytest.raises(ev.NoValidMatchError):
        ev.cmc_map(np.array([[0.1]]), [0], [0], [1], [0])


def test_duplicate_match_never_hurts_rank1():
    rng = np.random.default_rng(4)
    for _ in range(20):
        dist = rng.random((1, 6))
        g_labels = [0, 1, 2, 0, 1, 2]
        base = ev.cmc_map(dist, [0], [0], g_labels, [1] * 6)
        dup = np.concatenate([dist, [[float(dist.min()) / 2]]], axis=1)
        res = ev.cmc_map(dup, [0], [0], g_labels + [0], [1] * 7)
        assert res.rank1 >= base.rank1


def test_map_rank_invariance_under_monotone_transform():
    rng = np.random.default_rng(5)
    dist = rng.random((4, 10))
    q_labels = [0, 1, 2, 3]
    g_labels = rng.integers(0, 4, 10).tolist() + []
    g_labels[:4] = [0, 1, 2, 3]
    a = ev.cmc_map(dist, q_labels, [0] * 4, g_labels, [1] * 10)
    b = ev.cmc_map(np.exp(3 * dist) + 7, q_labels, [0] * 4, g_labels, [1] * 10)
    assert a.map == b.map
    np.testing.assert_array_equal(a.cmc, b.cmc)


def test_extract_deterministic_and_sized():
    cfg = PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=2, L=1, heads=2)
    model = DipModel(cfg, num_classes=4, seed=0)
    rng = np.random.default_rng(6)
    imgs = rng.random((5, 16, 8, 3)).astype(np.float32)
    idx1 = ev.extract(model, imgs, np.zeros(5), np.zeros(5))
    idx2 = ev.extract(model, np.concatenate([imgs, imgs[:1]]),
                      np.zeros(6), np.zeros(6))
    assert len(idx1) == 5
    np.testing.assert_array_equal(idx2.dips[5], idx2.dips[0])
    np.testing.assert_array_equal(idx1.dips, idx2.dips[:5])


def test_extract_config_mismatch():
    cfg = PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=2, L=1, heads=2)
    model = DipModel(cfg, num_classes=4, seed=0)
    with pytest.raises(ev.ConfigMismatchError):
        ev.extract(model, np.zeros((2, 8, 8, 3)), [0, 0], [0, 0])


def test_baseline_extract_is_cls_euclidean():
    cfg = PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=0, L=1, heads=2)
    model = DipModel(cfg, num_classes=4, seed=0)
    rng = np.random.default_rng(7)
    imgs = rng.random((4, 16, 8, 3)).astype(np.float32)
    idx = ev.extract(model, imgs, np.arange(4), np.zeros(4))
    assert idx.feature_kind == "cls"
    assert idx.dips.shape[1] == 1
    dist = ev.distance_matrix(idx, idx)
    out = model.forward(imgs)
    f = out.f_cls.data.astype(np.float64)
    want = np.linalg.norm(f[:, None] - f[None, :], axis=-1)
    np.testing.assert_allclose(dist, want, atol=1e-10)
