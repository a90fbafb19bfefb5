import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_gradients
from hvnet.detect_head import (AnchorConfig, DecodeConfig, DetectionHead, FeatureGeometry,
                               HeadOutput, LossConfig, TargetAssignment, ap_40, assign_targets,
                               corner_loss, corner_offsets, decode_boxes, decode_detections,
                               focal_loss, generate_anchors, sigmoid, total_loss)
from hvnet.rotbox import bev_of, canonical_box3d, riou

seeds = st.integers(0, 2**31)


def _one_size(w=1.0, l=2.0, h=1.5, orientations=(0.0,)):
    return AnchorConfig(sizes=(((w, l, h),),), orientations=orientations, z_centers=(-1.0,),
                        pos_thresholds=(0.5,), neg_thresholds=(0.3,))


# -- anchors ---------------------------------------------------------------

def test_anchor_counts():
    cfg = AnchorConfig(sizes=(((1.0, 2.0, 1.5),),), z_centers=(-1.0,), pos_thresholds=(0.5,),
                       neg_thresholds=(0.3,))
    anchors = generate_anchors(FeatureGeometry((0, 0), (1, 1), (2, 2)), cfg, 0)
    assert anchors.shape == (16, 7)
    assert AnchorConfig().n_anchors(2) == 8


def test_anchor_pixel_center():
    anchors = generate_anchors(FeatureGeometry((0.0, -32.0), (0.4, 0.4), (160, 160)), AnchorConfig(), 0)
    np.testing.assert_allclose(anchors[0, :2], [0.2, -31.8], atol=1e-12)
    # flat order is (ix, iy, a): the next pixel along y comes after A anchors
    np.testing.assert_allclose(anchors[4, :2], [0.2, -31.4], atol=1e-12)


def test_anchor_z_and_sizes():
    anchors = generate_anchors(FeatureGeometry((0, 0), (1, 1), (1, 1)), AnchorConfig(), 2)
    assert np.all(anchors[:, 2] == -1.0)
    assert sorted(set(map(tuple, np.round(anchors[:, [3, 4, 5]], 6)))) == [(3.5, 1.7, 1.56), (6.0, 2.0, 1.56)]


# -- targets ---------------------------------------------------------------

def test_identical_anchor_is_positive_with_zero_targets():
    cfg = _one_size()
    anchor = canonical_box3d([[3.0, 4.0, -1.0, 2.0, 1.0, 1.5, 0.0]])
    asg = assign_targets(anchor, anchor, cfg, 0)
    assert asg.labels.tolist() == [1]
    assert not np.any(asg.corner_targets) and not np.any(asg.vertical_targets)


def test_translated_gt_offsets():
    anchor = canonical_box3d([[3.0, 4.0, -1.0, 2.0, 1.0, 1.5, 0.3]])
    gt = anchor.copy()
    gt[0, 0] += 1.0
    d = corner_offsets(bev_of(anchor), bev_of(gt)).reshape(4, 2)
    np.testing.assert_allclose(d, [[1, 0]] * 4, atol=1e-12)


def test_far_anchor_negative_and_ignore_band():
    cfg = _one_size()
    gt = canonical_box3d([[0.0, 0.0, -1.0, 2.0, 1.0, 1.5, 0.0]])
    anchors = canonical_box3d([[0.0, 0.0, -1.0, 2.0, 1.0, 1.5, 0.0],  # iou 1
                               [0.8, 0.0, -1.0, 2.0, 1.0, 1.5, 0.0],  # iou 0.6/1.4... ~0.43 -> ignore
                               [9.0, 9.0, -1.0, 2.0, 1.0, 1.5, 0.0]])  # iou 0
    iou_mid = riou(bev_of(anchors[1]), bev_of(gt[0]))
    assert 0.3 <= iou_mid <= 0.5
    asg = assign_targets(anchors, gt, cfg, 0)
    assert asg.labels.tolist() == [1, -1, 0]


def test_best_anchor_forced_positive():
    cfg = _one_size()
    gt = canonical_box3d([[0.0, 0.0, -1.0, 2.0, 1.0, 1.5, 0.0]])
    anchors = canonical_box3d([[1.2, 0.0, -1.0, 2.0, 1.0, 1.5, 0.0], [1.6, 0.0, -1.0, 2.0, 1.0, 1.5, 0.0]])
    asg = assign_targets(anchors, gt, cfg, 0)
    assert asg.labels[0] == 1 and asg.matched[0] == 0
    off = AnchorConfig(**{**cfg.__dict__, "force_best_anchor": False})
    assert assign_targets(anchors, gt, off, 0).labels[0] != 1


def test_no_gt_all_negative():
    anchors = generate_anchors(FeatureGeometry((0, 0), (1, 1), (3, 3)), _one_size(), 0)
    asg = assign_targets(anchors, np.zeros((0, 7)), _one_size(), 0)
    assert np.all(asg.labels == 0) and asg.n_pos == 0


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_assignment_translation_equivariant(seed):
    rng = np.random.default_rng(seed)
    cfg = _one_size(orientations=(0.0, math.pi / 2))
    anchors = generate_anchors(FeatureGeometry((0, 0), (0.5, 0.5), (12, 12)), cfg, 0)
    gts = canonical_box3d(np.column_stack([rng.uniform(1, 5, 2), rng.uniform(1, 5, 2), np.full(2, -0.9),
                                           rng.uniform(1.5, 2.5, 2), rng.uniform(0.8, 1.2, 2), np.full(2, 1.6),
                                           rng.uniform(0, np.pi, 2)]))
    shift = np.array([4.0, -2.0, 0, 0, 0, 0, 0])  # multiple of the pixel pitch, exact in binary
    a = assign_targets(anchors, gts, cfg, 0)
    b = assign_targets(anchors + shift, gts + shift, cfg, 0)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_allclose(a.corner_targets, b.corner_targets, atol=1e-12)


def random_pair(rng):
    """Anchor and gt in the regime where vertical residuals are exact."""
    w, l = rng.uniform(0.5, 2.0), rng.uniform(0.5, 6.0)
    anc_h = rng.uniform(1.0, 2.0)
    anchor = canonical_box3d([rng.uniform(-5, 5), rng.uniform(-5, 5), -1.0, l, w, anc_h,
                              rng.choice([0, math.pi / 4, math.pi / 2, 3 * math.pi / 4])])
    gt = canonical_box3d([anchor[0] + rng.normal(), anchor[1] + rng.normal(), rng.uniform(-2.0, -0.5),
                          l * rng.uniform(0.7, 1.4), w * rng.uniform(0.7, 1.4),
                          anc_h * rng.uniform(0.5, 2.0), rng.uniform(0, np.pi)])
    return anchor, gt


def yaw_gap(a, b):
    d = (a - b) % math.pi
    return min(d, math.pi - d)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_encode_decode_round_trip(seed):
    anchor, gt = random_pair(np.random.default_rng(seed))
    cor = corner_offsets(bev_of(anchor), bev_of(gt))
    vert = np.array([[gt[2] - anchor[2], gt[5] - anchor[5]]])
    boxes, ok = decode_boxes(anchor[None], cor, vert)
    assert ok[0]
    np.testing.assert_allclose(boxes[0, [0, 1, 3, 4]], gt[[0, 1, 3, 4]], atol=1e-6)
    assert yaw_gap(boxes[0, 6], gt[6]) <= 1e-6
    assert boxes[0, 2] == gt[2] and boxes[0, 5] == gt[5]


def test_zero_offsets_decode_to_anchor():
    anchors = generate_anchors(FeatureGeometry((0, 0), (1, 1), (2, 2)), AnchorConfig(), 2)
    boxes, ok = decode_boxes(anchors, np.zeros((len(anchors), 8)), np.zeros((len(anchors), 2)))
    assert ok.all()
    np.testing.assert_allclose(boxes, anchors, atol=1e-12)


def test_decode_drops_degenerate_quads():
    anchors = canonical_box3d([[0, 0, -1, 2, 1, 1.5, 0.0]])
    collapse = -np.array([[1, 0.5, -1, 0.5, -1, -0.5, 1, -0.5]])  # every corner to the center
    out = decode_detections([anchors], [HeadOutput(np.array([5.0]), collapse, np.zeros((1, 2)))],
                            DecodeConfig(nms_thresholds=(0.5,)))
    assert len(out) == 0 and out.dropped == 1


def test_duplicate_decodes_suppressed():
    anchors = canonical_box3d([[0, 0, -1, 2, 1, 1.5, 0.0]] * 2)
    preds = HeadOutput(np.array([2.0, 1.0]), np.zeros((2, 8)), np.zeros((2, 2)))
    out = decode_detections([anchors], [preds], DecodeConfig(nms_thresholds=(0.4,)))
    assert len(out) == 1 and out.scores[0] == pytest.approx(sigmoid(2.0))


def test_score_threshold_filters():
    anchors = canonical_box3d([[0, 0, -1, 2, 1, 1.5, 0.0]])
    preds = HeadOutput(np.array([-10.0]), np.zeros((1, 8)), np.zeros((1, 2)))
    assert len(decode_detections([anchors], [preds], DecodeConfig(nms_thresholds=(0.4,)))) == 0


# -- head ------------------------------------------------------------------

def test_head_channels_and_shapes():
    head = DetectionHead(AnchorConfig(), 6)
    assert head.channel_counts(2) == {"cls": 8, "loc": 64, "vert": 16}
    store = head.init_params(np.random.default_rng(0))
    assert store["head2.loc.weight"].shape == (64, 6, 3, 3)
    feats = [np.zeros((6, 5, 4)), np.zeros((6, 3, 2)), np.zeros((6, 3, 2))]
    outs, _ = head.forward(store, feats)
    assert [o.logits.shape for o in outs] == [(5 * 4 * 4,), (3 * 2 * 4,), (3 * 2 * 8,)]
    assert outs[2].corners.shape == (48, 8) and outs[2].vertical.shape == (48, 2)


def test_zero_head_gives_half_probability():
    head = DetectionHead(AnchorConfig(), 3)
    store = {k: np.zeros_like(v) for k, v in head.init_params(np.random.default_rng(0)).items()}
    outs, _ = head.forward(store, [np.ones((3, 2, 2))] * 3)
    assert np.all(outs[0].scores == 0.5) and not np.any(outs[0].corners)


def test_head_flat_layout_matches_anchor_order():
    # channel a*8 + j at pixel (ix, iy) must land on anchor (ix, iy, a), component j
    head = DetectionHead(AnchorConfig(), 1)
    store = {k: np.zeros_like(v) for k, v in head.init_params(np.random.default_rng(0)).items()}
    a, j = 5, 3
    store["head2.loc.bias"][a * 8 + j] = 1.0
    outs, _ = head.forward(store, [np.zeros((1, 3, 3))] * 3)
    hot = np.argwhere(outs[2].corners)
    assert set(hot[:, 1]) == {j} and set(hot[:, 0] % 8) == {a} and len(hot) == 9


# -- losses ----------------------------------------------------------------

def test_focal_examples():
    assert focal_loss(np.array([0.5]), np.array([True]), 0.75, 2.0)[0] == pytest.approx(0.75 * 0.25 * math.log(2))
    assert focal_loss(np.array([1 - 1e-9]), np.array([True]), 0.75, 2.0)[0] < 1e-12
    p = np.array([0.3])
    assert focal_loss(p, np.array([True]), 1.0, 0.0)[0] == pytest.approx(-math.log(0.3))
    assert focal_loss(np.array([0.0]), np.array([True]), 0.75, 2.0)[0] == pytest.approx(-0.75 * math.log(1e-7), rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_focal_decreasing_on_positives(p, dp):
    lo, hi = focal_loss(np.array([p, p + dp]), np.array([True, True]), 0.25, 2.0)
    assert hi < lo


def test_corner_loss_examples():
    assert corner_loss(np.ones(8), np.ones(8)) == 0.0
    t = np.zeros(8)
    assert corner_loss(np.array([0.5] + [0] * 7), t) == 0.125
    assert corner_loss(np.array([2.0] + [0] * 7), t) == 1.5


def _single_anchor_case(logit, d_corner, d_vert, w_h=1.5):
    asg = TargetAssignment(np.array([1]), np.array([0]), np.zeros((1, 8)), np.zeros((1, 2)))
    corners = np.zeros((1, 8))
    corners[0, 0] = d_corner
    vert = np.array([[d_vert, 0.0]])
    return total_loss([asg], [HeadOutput(np.array([logit]), corners, vert)],
                      LossConfig(alpha=(0.75,), gamma=(2.0,), w_h=w_h))


def test_total_loss_hand_case():
    out = _single_anchor_case(0.0, 0.5, 0.5)
    assert out.total == pytest.approx(0.75 * 0.25 * math.log(2) + 0.125 + 1.5 * 0.125, rel=1e-12)
    assert out.n_pos == 1


def test_total_loss_h_weight_linear():
    a = _single_anchor_case(0.0, 0.5, 0.5, w_h=1.5)
    b = _single_anchor_case(0.0, 0.5, 0.5, w_h=3.0)
    assert b.total - a.total == pytest.approx(1.5 * a.h, rel=1e-12)


def test_total_loss_near_zero_when_perfect():
    out = _single_anchor_case(30.0, 0.0, 0.0)
    assert out.total < 1e-10


def test_total_loss_no_positives_not_divided_by_zero():
    asg = TargetAssignment(np.array([0, 0]), np.array([-1, -1]), np.zeros((2, 8)), np.zeros((2, 2)))
    out = total_loss([asg], [HeadOutput(np.zeros(2), np.zeros((2, 8)), np.zeros((2, 2)))],
                     LossConfig(alpha=(0.25,), gamma=(2.0,)))
    assert out.n_pos == 0 and out.total == pytest.approx(2 * 0.75 * 0.25 * math.log(2))


def test_ignored_anchors_contribute_nothing():
    asg = TargetAssignment(np.array([-1]), np.array([-1]), np.zeros((1, 8)), np.zeros((1, 2)))
    out = total_loss([asg], [HeadOutput(np.array([3.0]), np.ones((1, 8)), np.ones((1, 2)))],
                     LossConfig(alpha=(0.25,), gamma=(2.0,)))
    assert out.total == 0.0 and not np.any(out.grads[0].logits)


def random_loss_instance(rng, n_cls=2, n=30):
    asgs, preds = [], []
    for _ in range(n_cls):
        labels = rng.choice([-1, 0, 1], n, p=[0.2, 0.6, 0.2])
        asgs.append(TargetAssignment(labels, np.where(labels == 1, 0, -1), rng.normal(size=(n, 8)),
                                     rng.normal(size=(n, 2))))
        preds.append(HeadOutput(rng.uniform(-4, 4, n), rng.normal(size=(n, 8)), rng.normal(size=(n, 2))))
    return asgs, preds


def test_total_loss_gradcheck():
    rng = np.random.default_rng(0)
    cfg = LossConfig(alpha=(0.75, 0.25), gamma=(2.0, 2.0))
    for _ in range(5):
        asgs, preds = random_loss_instance(rng)
        out = total_loss(asgs, preds, cfg)
        arrays, analytic = {}, {}
        for k, (p, g) in enumerate(zip(preds, out.grads)):
            for name in ("logits", "corners", "vertical"):
                arrays[f"{k}.{name}"] = getattr(p, name)
                analytic[f"{k}.{name}"] = getattr(g, name)
        rep = check_gradients(lambda: total_loss(asgs, preds, cfg).total, arrays, analytic)
        assert rep.ok(), rep


def test_head_gradcheck():
    rng = np.random.default_rng(1)
    cfg = AnchorConfig(sizes=(((1.0, 2.0, 1.5),),), orientations=(0.0, 1.0), z_centers=(-1.0,),
                       pos_thresholds=(0.5,), neg_thresholds=(0.3,))
    head = DetectionHead(cfg, 2)
    store = head.init_params(rng)
    x = rng.normal(size=(2, 3, 4))
    outs, caches = head.forward(store, [x])
    d = HeadOutput(rng.normal(size=outs[0].logits.shape), rng.normal(size=outs[0].corners.shape),
                   rng.normal(size=outs[0].vertical.shape))
    grads = {}
    dx = head.backward(store, [d], caches, grads)[0]

    def f():
        o = head.forward(store, [x])[0][0]
        return float(np.sum(d.logits * o.logits) + np.sum(d.corners * o.corners) + np.sum(d.vertical * o.vertical))

    arrays = dict(store, x=x)
    rep = check_gradients(f, arrays, dict(grads, x=dx))
    assert rep.ok(), rep


# -- AP --------------------------------------------------------------------

GT = [np.array([[0, 0, 4, 2, 0.0]]), np.array([[10, 0, 4, 2, 0.3], [20, 0, 4, 2, 1.0]])]


def test_ap_perfect_and_empty():
    assert ap_40([(g, np.ones(len(g))) for g in GT], GT, 0.7) == 1.0
    assert ap_40([(np.zeros((0, 5)), np.zeros(0)) for _ in GT], GT, 0.7) == 0.0


def test_ap_false_positive_ranked_first():
    gt = [np.array([[0, 0, 4, 2, 0.0]])]
    dets = [(np.array([[30, 30, 4, 2, 0.0], [0, 0, 4, 2, 0.0]]), np.array([0.9, 0.8]))]
    assert ap_40(dets, gt, 0.5) == pytest.approx(0.5)


def test_ap_no_ground_truth_is_nan():
    assert math.isnan(ap_40([(np.zeros((0, 5)), np.zeros(0))], [np.zeros((0, 5))], 0.5))


def test_ap_accepts_3d_boxes():
    gt3 = [canonical_box3d([[0, 0, -1, 4, 2, 1.5, 0.0]])]
    assert ap_40([(gt3[0], np.ones(1))], gt3, 0.7) == 1.0


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_ap_invariant_to_monotone_rescaling(seed):
    rng = np.random.default_rng(seed)
    dets = []
    for g in GT:
        noisy = np.vstack([g + np.c_[rng.normal(size=(len(g), 2)) * 0.5, np.zeros((len(g), 3))],
                           [[rng.uniform(-5, 25), 5, 4, 2, 0.0]]])
        dets.append((noisy, rng.random(len(noisy))))
    base = ap_40(dets, GT, 0.5)
    warped = [(b, np.exp(3 * s) - 7) for b, s in dets]
    assert ap_40(warped, GT, 0.5) == base
