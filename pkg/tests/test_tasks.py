import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrnet_engine import ops
from hrnet_engine.tasks import (COCO_FALLOFF, KeypointSet, decode_channel, decode_keypoints, make_gaussian_targets,
                                miou, mse_heatmap_loss, oks, softmax_ce_seg_loss)
from hrnet_engine.tensor import ShapeError, Tensor


def kp(points, vis=None, scale=1.0, falloff=None):
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    vis = [2] * len(points) if vis is None else vis
    return KeypointSet(points, vis, scale, falloff)


# --- targets and loss


def test_gaussian_target_one_pixel_away():
    hm = make_gaussian_targets(kp([[4.0, 4.0]]), (16, 16))
    assert hm.shape == (1, 1, 4, 4)
    assert hm[0, 0, 1, 1] == 1.0
    assert hm[0, 0, 1, 2] == pytest.approx(math.exp(-1 / 8), abs=1e-12)
    assert hm[0, 0, 2, 2] == pytest.approx(math.exp(-2 / 8), abs=1e-12)


def test_gaussian_target_continuous_centre_not_rounded():
    hm = make_gaussian_targets(kp([[6.0, 4.0]]), (16, 16))[0, 0]
    # centre at heatmap x = 1.5: columns 1 and 2 are equidistant
    assert hm[1, 1] == hm[1, 2] == pytest.approx(math.exp(-0.25 / 8))


def test_invisible_keypoint_gives_zero_channel():
    hm = make_gaussian_targets(kp([[4, 4], [8, 8]], vis=[2, 0]), (16, 16))
    assert hm[0, 0].max() == 1.0 and not hm[0, 1].any()


def test_target_channels_follow_keypoint_permutation():
    pts = np.array([[4.0, 8.0], [12.0, 4.0], [8.0, 12.0]])
    perm = [2, 0, 1]
    a = make_gaussian_targets(kp(pts), (16, 16))
    b = make_gaussian_targets(kp(pts[perm]), (16, 16))
    np.testing.assert_array_equal(a[:, perm], b)


def test_target_dims_must_divide_by_stride():
    with pytest.raises(ShapeError):
        make_gaussian_targets(kp([[1, 1]]), (18, 16))


def test_mse_loss_matches_loop():
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 4, 5))
    total = 0.0
    for v in np.nditer(p - t):
        total += float(v) ** 2
    assert mse_heatmap_loss(Tensor(p), t).item() == pytest.approx(total / p.size, rel=1e-12)
    assert mse_heatmap_loss(Tensor(t), t).item() == 0.0
    with pytest.raises(ShapeError):
        mse_heatmap_loss(Tensor(p), t[:1])


# --- decoding


def test_quarter_offset_worked_example():
    hm = np.zeros((4, 5))
    hm[1, 2] = 1.0
    hm[1, 3] = 0.5  # right neighbour is the stronger one
    hm[0, 2] = 0.2
    x, y, peak = decode_channel(hm)
    assert (x, y, peak) == (2.25, 1.0, 1.0)
    (pred,) = decode_keypoints(hm[None, None])
    np.testing.assert_array_equal(pred.points, [[9.0, 4.0]])


def test_single_pixel_heatmap_has_no_shift():
    hm = np.zeros((3, 3))
    hm[1, 1] = 2.0
    assert decode_channel(hm) == (1.0, 1.0, 2.0)


def test_tie_breaks_to_first_in_scan_order():
    hm = np.zeros((3, 3))
    hm[1, 1] = 1.0
    hm[1, 0] = hm[1, 2] = 0.5
    assert decode_channel(hm)[:2] == (0.75, 1.0)
    hm2 = np.zeros((3, 3))
    hm2[0, 0] = hm2[2, 2] = 1.0
    assert decode_channel(hm2)[:2] == (0.0, 0.0)


def test_non_positive_heatmap_is_undetected():
    (pred,) = decode_keypoints(-np.ones((1, 1, 3, 3)))
    assert pred.visibility[0] == 0


def test_decode_round_trip_exact_on_grid():
    truth = kp([[8.0, 12.0], [20.0, 16.0]])
    (pred,) = decode_keypoints(make_gaussian_targets(truth, (32, 32)))
    # the peak lands on a grid point and the symmetric neighbours tie, so the shift follows scan order
    assert np.abs(pred.points - truth.points).max() <= 1.0


def test_round_trip_within_two_pixels_for_interior_points():
    rng = np.random.default_rng(0)
    size = 128
    lo, hi = 8 * 4, size - 1 - 8 * 4
    for _ in range(200):
        truth = kp(rng.uniform(lo, hi, size=(3, 2)))
        (pred,) = decode_keypoints(make_gaussian_targets(truth, (size, size)))
        err = np.abs(pred.points - truth.points)
        # the quarter step moves along one axis only, so each coordinate is within 2 px
        assert err.max() <= 2.0
        assert np.linalg.norm(err, axis=1).max() <= math.sqrt(5.0)


# --- OKS


def test_oks_identical_is_exactly_one():
    truth = kp(np.random.default_rng(1).uniform(0, 50, (17, 2)), scale=30.0)
    assert truth.falloff.tolist() == COCO_FALLOFF.tolist()
    assert oks(truth, truth) == 1.0


def test_oks_worked_example():
    s, k = 10.0, 0.5
    d = math.sqrt(2) * s * k
    truth = kp([[0.0, 0.0]], scale=s, falloff=[k])
    pred = kp([[d, 0.0]], scale=s, falloff=[k])
    assert oks(pred, truth) == pytest.approx(math.exp(-1), abs=1e-12)


def test_oks_ignores_invisible_keypoints():
    truth = kp([[0, 0], [5, 5]], vis=[2, 0], scale=4.0, falloff=[0.1, 0.1])
    good = kp([[0, 0], [5, 5]])
    far = kp([[0, 0], [1e6, -1e6]])
    assert oks(good, truth) == oks(far, truth) == 1.0
    with pytest.raises(ValueError):
        oks(good, kp([[0, 0], [1, 1]], vis=[0, 0]))


@given(dx=st.floats(-100, 100), dy=st.floats(-100, 100), seed=st.integers(0, 100))
@settings(max_examples=50, deadline=None)
def test_oks_translation_invariant(dx, dy, seed):
    rng = np.random.default_rng(seed)
    t, p = rng.uniform(0, 40, (5, 2)), rng.uniform(0, 40, (5, 2))
    shift = np.array([dx, dy])
    a = oks(kp(p), kp(t, scale=8.0, falloff=[0.2] * 5))
    b = oks(kp(p + shift), kp(t + shift, scale=8.0, falloff=[0.2] * 5))
    assert a == pytest.approx(b, abs=1e-9)


@given(d=st.floats(0, 5), extra=st.floats(0.01, 5))
@settings(max_examples=50, deadline=None)
def test_oks_strictly_decreasing_in_distance(d, extra):
    truth = kp([[0.0, 0.0]], scale=2.0, falloff=[1.0])
    assert oks(kp([[d + extra, 0.0]]), truth) < oks(kp([[d, 0.0]]), truth)


def test_keypoint_set_validation():
    with pytest.raises(ValueError):
        kp([[0, 0]], vis=[3])
    with pytest.raises(ValueError):
        kp([[0, 0]], scale=0.0)
    with pytest.raises(ShapeError):
        KeypointSet(np.zeros((2, 2)), [2])
    with pytest.raises(ValueError):
        kp([[40, 0]]).check_bounds(32, 32)


# --- segmentation


def test_iou_half_for_hand_confusion():
    pred = np.array([[0, 0], [1, 1]])
    target = np.array([[0, 1], [1, 1]])
    iou, _ = miou(pred, target, 2)
    assert iou[0] == 0.5
    assert iou[1] == pytest.approx(2 / 3)


def test_miou_perfect_and_empty_classes_skipped():
    t = np.array([[0, 1], [1, 0]])
    iou, m = miou(t, t, 4)
    assert m == 1.0 and np.isnan(iou[2:]).all()


def test_miou_ignore_index():
    t = np.array([0, 255, 1])
    p = np.array([0, 1, 1])
    assert miou(p, t, 2)[1] == 1.0


@given(seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_miou_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    perm = rng.permutation(4)
    iou, m = miou(p, t, 4)
    iou2, m2 = miou(perm[p], perm[t], 4)
    assert m == pytest.approx(m2, abs=1e-12)
    np.testing.assert_allclose(iou2[perm], iou)


def test_uniform_logits_give_log_num_classes():
    logits = Tensor(np.zeros((2, 19, 4, 4)))
    target = np.random.default_rng(0).integers(0, 19, (2, 16, 16))
    assert softmax_ce_seg_loss(logits, target).item() == pytest.approx(math.log(19), abs=1e-12)


def test_seg_loss_upsamples_quarter_logits():
    logits = Tensor(np.zeros((1, 3, 2, 2)))
    up = ops.bilinear_resize(logits, 8, 8)
    assert up.shape == (1, 3, 8, 8)
    with pytest.raises(ShapeError):
        softmax_ce_seg_loss(logits, np.zeros((8, 8), dtype=int))
