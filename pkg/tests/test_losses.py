"""Tests for loss terms, part-based distances, and hard mining."""

import math

import numpy as np
import pytest

from dipnet import autodiff as ad
from dipnet import losses as ls
from dipnet.autodiff import Tensor
from dipnet.losses import DiPSet, LossCoefficients


def rand_set(rng, M=3, D=4):
    return DiPSet(
        dips=rng.normal(size=(M, D)),
        weights=rng.uniform(0.05, 0.95, size=M),
    )


# -- weighted feature --------------------------------------------------


def test_weighted_feature_all_ones_is_plain_sum():
    rng = np.random.default_rng(0)
    s = DiPSet(dips=rng.normal(size=(4, 6)), weights=np.ones(4))
    out = ls.weighted_dip_feature(s).data
    np.testing.assert_allclose(out, s.dips.sum(axis=0), rtol=1e-5)


def test_weighted_feature_single_active_part():
    s = DiPSet(dips=np.array([[5.0, 1.0], [7.0, 2.0]]), weights=np.array([1.0, 0.0]))
    np.testing.assert_allclose(ls.weighted_dip_feature(s).data, [5.0, 1.0], atol=1e-7)


def test_weighted_feature_hand_case():
    s = DiPSet(dips=np.array([[2.0], [4.0]]), weights=np.array([0.5, 0.5]))
    np.testing.assert_allclose(ls.weighted_dip_feature(s).data, [3.0], atol=1e-7)


# -- id loss ------------------------------------------------------------


def id_params(D, K, rng):
    return {
        "cls_w": Tensor(rng.normal(size=(D, K)), requires_grad=True),
        "cls_b": Tensor(np.zeros(K), requires_grad=True),
    }


def test_id_loss_uniform_logits():
    params = {
        "cls_w": Tensor(np.zeros((3, 4)), requires_grad=True),
        "cls_b": Tensor(np.zeros(4), requires_grad=True),
    }
    out = ls.id_loss(np.ones(3), 2, params)
    assert float(out.data) == pytest.approx(math.log(4), rel=1e-6)


def test_id_loss_confident_correct_approaches_zero():
    params = {
        "cls_w": Tensor(np.zeros((2, 3)), requires_grad=True),
        "cls_b": Tensor(np.array([50.0, 0.0, 0.0]), requires_grad=True),
    }
    assert float(ls.id_loss(np.zeros(2), 0, params).data) < 1e-6


def test_id_loss_two_class_hand_value():
    params = {
        "cls_w": Tensor(np.eye(2), requires_grad=True),
        "cls_b": Tensor(np.zeros(2), requires_grad=True),
    }
    out = ls.id_loss(np.array([1.0, 0.0]), 0, params)
    assert float(out.data) == pytest.approx(0.31326168, rel=1e-5)


def test_id_loss_label_out_of_range():
    params = id_params(3, 4, np.random.default_rng(1))
    with pytest.raises(IndexError):
        ls.id_loss(np.ones(3), 7, params)


# -- part distance ------------------------------------------------------


def test_part_distance_identical_sets_zero():
    rng = np.random.default_rng(2)
    s = rand_set(rng)
    assert ls.part_distance(s, s) == 0.0


def test_part_distance_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rand_set(rng), rand_set(rng)
        assert ls.part_distance(a, b) == pytest.approx(ls.part_distance(b, a), rel=1e-12)


def test_part_distance_uniform_weights_hand_case():
    # d = (1, 3), combined weights (0, 0) -> softmax uniform -> distance 2
    a = DiPSet(dips=np.array([[0.0], [0.0]]), weights=np.zeros(2))
    b = DiPSet(dips=np.array([[1.0], [3.0]]), weights=np.ones(2))
    assert ls.part_distance(a, b) == pytest.approx(2.0, rel=1e-9)


def test_part_distance_constant_weight_shift_invariance():
    rng = np.random.default_rng(4)
    a, b = rand_set(rng), rand_set(rng)
    base = ls.part_distance(a, b)
    a2 = DiPSet(dips=a.dips, weights=a.weights + 0.0)
    # shifting the combined weights by a constant: multiply one side by e^c
    # does not do that, so shift via both raw vectors being offset is not
    # available; instead verify on the combined-weight formula directly
    d = np.linalg.norm(a.dips - b.dips, axis=1)
    wc = a.weights * b.weights
    for c in (-3.0, 0.7, 42.0):
        e = np.exp((wc + c) - (wc + c).max())
        shifted = float(np.sum(e / e.sum() * d))
        assert shifted == pytest.approx(base, rel=1e-9)
    assert ls.part_distance(a2, b) == pytest.approx(base, rel=1e-12)


def test_pairwise_matches_scalar_part_distance():
    # the float32 norm expansion loses ~sqrt(eps) accuracy near zero
    # distance, so the self-pairs get a looser bound than distinct pairs
    rng = np.random.default_rng(5)
    sets = [rand_set(rng, M=4, D=6) for _ in range(5)]
    dips = Tensor(np.stack([s.dips for s in sets]))
    weights = Tensor(np.stack([s.weights for s in sets]))
    dist = ls.pairwise_part_distances(dips, weights).data
    for i in range(5):
        for j in range(5):
            tol = 2e-3 if i == j else 1e-4
            assert dist[i, j] == pytest.approx(
                ls.part_distance(sets[i], sets[j]), abs=tol
            )


def test_pairwise_no_weighting_is_mean_over_parts():
    rng = np.random.default_rng(6)
    sets = [rand_set(rng, M=3, D=4) for _ in range(4)]
    dips = Tensor(np.stack([s.dips for s in sets]))
    weights = Tensor(np.stack([s.weights for s in sets]))
    dist = ls.pairwise_part_distances(dips, weights, use_weighting=False).data
    d01 = np.linalg.norm(sets[0].dips - sets[1].dips, axis=1).mean()
    assert dist[0, 1] == pytest.approx(d01, abs=1e-5)


# -- triplet loss -------------------------------------------------------


def test_triplet_zero_when_separated():
    # positives at distance 0, negatives beyond the margin
    d = np.array([
        [0.0, 0.0, 9.0, 9.0],
        [0.0, 0.0, 9.0, 9.0],
        [9.0, 9.0, 0.0, 0.0],
        [9.0, 9.0, 0.0, 0.0],
    ])
    out = ls.triplet_from_distances(Tensor(d), [0, 0, 1, 1], margin=0.3)
    assert float(out.data) == 0.0


def test_triplet_hinge_hand_value():
    d = np.array([
        [0.0, 1.0, 0.5],
        [1.0, 0.0, 0.5],
        [0.5, 0.5, 0.0],
    ])
    # anchors 0 and 1: d_pos 1.0, d_neg 0.5 -> 0.8 each; anchor 2 has no
    # positive, so a third label-2 image is required
    d4 = np.zeros((4, 4))
    d4[:3, :3] = d
    d4[3, :] = d4[:, 3] = [0.5, 0.5, 0.1, 0.0]
    out = ls.triplet_from_distances(Tensor(d4), [0, 0, 1, 1], margin=0.3)
    # anchors 0,1: max(0, 1.0-0.5+0.3) = 0.8; anchors 2,3: max(0, 0.1-0.5+0.3)=0
    assert float(out.data) == pytest.approx(0.4, rel=1e-6)


def test_triplet_degenerate_batch_errors():
    d = np.zeros((3, 3))
    with pytest.raises(ls.DegenerateBatchError):
        ls.triplet_from_distances(Tensor(d), [0, 1, 2], margin=0.3)  # no positives
    with pytest.raises(ls.DegenerateBatchError):
        ls.triplet_from_distances(Tensor(d), [0, 0, 0], margin=0.3)  # no negatives


def brute_force_hardest(sets, labels):
    """Independent mining oracle: scalar distances, explicit loops."""
    n = len(sets)
    pos_idx, neg_idx = [], []
    for a in range(n):
        best_pos, best_pos_d = None, -1.0
        best_neg, best_neg_d = None, float("inf")
        for b in range(n):
            if b == a:
                continue
            d = ls.part_distance(sets[a], sets[b])
            if labels[b] == labels[a] and d > best_pos_d:
                best_pos, best_pos_d = b, d
            if labels[b] != labels[a] and d < best_neg_d:
                best_neg, best_neg_d = b, d
        pos_idx.append(best_pos)
        neg_idx.append(best_neg)
    return np.array(pos_idx), np.array(neg_idx)


def test_mining_agrees_with_brute_force_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(4), 2)  # 4 identities x 2 images
        sets = [rand_set(rng, M=3, D=5) for _ in range(8)]
        dips = Tensor(np.stack([s.dips for s in sets]))
        weights = Tensor(np.stack([s.weights for s in sets]))
        dist = ls.pairwise_part_distances(dips, weights).data
        got = ls.batch_hard_indices(dist, labels)
        want = brute_force_hardest(sets, labels)
        np.testing.assert_array_equal(got[0], want[0], err_msg=f"seed {seed} pos")
        np.testing.assert_array_equal(got[1], want[1], err_msg=f"seed {seed} neg")


def test_triplet_loss_batch_surface():
    rng = np.random.default_rng(7)
    labels = [0, 0, 1, 1]
    sets = [rand_set(rng) for _ in range(4)]
    out = ls.triplet_loss_batch(sets, labels, margin=0.3)
    assert np.isfinite(out.data)


# -- position loss ------------------------------------------------------


def test_pe_loss_zero_at_target():
    rng = np.random.default_rng(8)
    p = rng.random((5, 2))
    assert float(ls.pe_loss(p, p).data) == 0.0


def test_pe_loss_hand_value():
    out = ls.pe_loss(np.array([[0.3, 0.4]]), np.array([[0.0, 0.0]]))
    assert float(out.data) == pytest.approx(0.25, rel=1e-6)


def test_pe_loss_quadratic_scaling():
    rng = np.random.default_rng(9)
    p = rng.random((4, 2))
    q = rng.random((4, 2))
    base = float(ls.pe_loss(p, q).data)
    doubled = float(ls.pe_loss(p, p + 2 * (q - p)).data)
    assert doubled == pytest.approx(4 * base, rel=1e-5)


def test_pe_loss_shape_check():
    with pytest.raises(ad.ShapeMismatchError):
        ls.pe_loss(np.zeros((3, 2)), np.zeros((4, 2)))


# -- gradients ----------------------------------------------------------


def test_loss_gradients_32bit():
    rng = np.random.default_rng(10)
    labels = np.array([0, 0, 1, 1])
    weights = Tensor(rng.uniform(0.2, 0.8, size=(4, 3)).astype(np.float32))
    params = {
        "cls_w": Tensor(rng.normal(size=(5, 2)).astype(np.float32), requires_grad=True),
        "cls_b": Tensor(np.zeros(2, dtype=np.float32), requires_grad=True),
    }

    def f_id(dips):
        feat = ls.weighted_dip_feature_batch(ad.reshape(dips, (4, 3, 5)), weights)
        return ls.id_loss_batch(feat, labels, params)

    def f_trip(dips):
        dist = ls.pairwise_part_distances(ad.reshape(dips, (4, 3, 5)), weights)
        return ls.triplet_from_distances(dist, labels, 0.3)

    def f_pe(pred):
        return ls.pe_loss(Tensor(np.full((4, 2), 0.5, dtype=np.float32)),
                          ad.reshape(pred, (4, 2)))

    point = Tensor(rng.normal(size=(4, 3, 5)).astype(np.float32))
    assert ad.grad_check(f_id, point, 1e-3) < 1e-3
    assert ad.grad_check(f_trip, Tensor(rng.normal(size=(4, 3, 5)).astype(np.float32)), 1e-3) < 1e-3
    assert ad.grad_check(f_pe, Tensor(rng.normal(size=(4, 2)).astype(np.float32)), 1e-3) < 1e-3


def test_total_loss_zero_coefficients():
    rng = np.random.default_rng(11)
    from dipnet.encoder import PatchConfig
    from dipnet.model import DipModel

    cfg = PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=2, L=1, heads=2)
    model = DipModel(cfg, num_classes=2, seed=0)
    images = rng.random((4, 16, 8, 3))
    out = model.forward(images)
    coeffs = LossCoefficients(lambda_id=0.0, lambda_t=0.0, lambda_pe=0.0)
    bd = ls.total_loss(out, [0, 0, 1, 1], model.params, coeffs)
    assert bd.total == 0.0


def test_total_loss_monotone_in_lambda_pe():
    rng = np.random.default_rng(12)
    from dipnet.encoder import PatchConfig
    from dipnet.model import DipModel

    cfg = PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=2, L=1, heads=2)
    model = DipModel(cfg, num_classes=2, seed=0)
    images = rng.random((4, 16, 8, 3))
    out = model.forward(images)
    totals = []
    for lam in (0.0, 0.5, 1.0):
        bd = ls.total_loss(out, [0, 0, 1, 1], model.params,
                           LossCoefficients(lambda_pe=lam))
        totals.append(bd.total)
    assert totals[0] <= totals[1] <= totals[2]


def test_total_loss_breakdown_invariant():
    rng = np.random.default_rng(13)
    from dipnet import geometry as geo
    from dipnet.encoder import PatchConfig
    from dipnet.model import DipModel

    cfg = PatchConfig(H=16, W=8, C=3, P=4, S=4, D=16, M=2, L=1, heads=2)
    model = DipModel(cfg, num_classes=2, seed=0)
    images = rng.random((4, 16, 8, 3))
    out = model.forward(images)
    K = geo.make_affine(tx=0.1)
    warped = np.stack([geo.transform_image(im, K) for im in images])
    out_xp = model.forward(warped)
    targets_xp = geo.transform_position(out.impl_positions.data, K)
    coeffs = LossCoefficients(lambda_id=0.7, lambda_t=1.3, lambda_pe=0.4)
    bd = ls.total_loss(out, [0, 0, 1, 1], model.params, coeffs,
                       out_xp=out_xp, targets_xp=targets_xp)
    expect = (0.7 * bd.id_loss + 1.3 * bd.triplet_loss
              + 0.4 * (bd.pe_loss + bd.pe_loss_transformed))
    assert bd.total == pytest.approx(expect, rel=1e-5)
    for v in bd.to_dict().values():
        assert np.isfinite(v)
