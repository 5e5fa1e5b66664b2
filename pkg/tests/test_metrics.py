import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occanomaly import metrics
from oracles import ball_count, exhaustive_auprc, pairwise_auroc


def random_volume(rng, shape=(16, 16, 16), levels=12, n_blobs=2, with_mask=False):
    scores = rng.integers(0, levels, size=shape) / levels
    gt = np.zeros(shape, bool)
    for _ in range(n_blobs):
        c = rng.integers(2, np.array(shape) - 2)
        gt[c[0] - 1:c[0] + 1, c[1] - 1:c[1] + 2, c[2]:c[2] + 2] = True
    scores = np.where(gt, np.minimum(scores + 0.3, 1.0), scores)
    mask = rng.random(shape) > 0.1 if with_mask else None
    return scores, gt, mask


@pytest.mark.parametrize("radius", [0, 1, 2, 4])
def test_ball_size_matches_lattice_count(radius):
    vol = np.zeros((13, 13, 13), bool)
    vol[6, 6, 6] = True
    assert metrics.dilate_labels(vol, radius).sum() == ball_count(radius)
    assert len(metrics.ball_offsets(radius)) == ball_count(radius)


def test_known_ball_counts():
    vol = np.zeros((11, 11, 11), bool)
    vol[5, 5, 5] = True
    assert metrics.dilate_labels(vol, 1).sum() == 7
    assert metrics.dilate_labels(vol, 4).sum() == 257


def test_dilation_clips_at_border():
    vol = np.zeros((5, 5, 5), bool)
    vol[0, 0, 0] = True
    d = metrics.dilate_labels(vol, 1)
    assert d.sum() == 4


def test_negative_radius_rejected():
    with pytest.raises(ValueError):
        metrics.dilate_labels(np.ones((2, 2, 2), bool), -1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_dilation_nested(seed):
    rng = np.random.default_rng(seed)
    vol = rng.random((12, 12, 12)) > 0.97
    d4, d5, d6 = (metrics.dilate_labels(vol, r) for r in (4, 5, 6))
    assert np.all(vol <= d4) and np.all(d4 <= d5) and np.all(d5 <= d6)


@pytest.mark.parametrize("seed", range(6))
def test_auroc_matches_pairwise(seed):
    rng = np.random.default_rng(seed)
    s, gt, mask = random_volume(rng, with_mask=seed % 2 == 1)
    assert metrics.auroc(s, gt, mask) == pytest.approx(pairwise_auroc(s, gt, mask), abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_roc_curve_area_equals_rank_statistic(seed):
    rng = np.random.default_rng(seed)
    s, gt, mask = random_volume(rng)
    roc = metrics.roc_curve(s, gt, mask)
    assert roc.area == pytest.approx(metrics.auroc(s, gt, mask), abs=1e-12)
    assert roc.fpr[0] == 0 and roc.tpr[0] == 0
    assert roc.fpr[-1] == pytest.approx(1.0) and roc.tpr[-1] == pytest.approx(1.0)


@pytest.mark.parametrize("seed,radius", [(0, 1), (1, 2), (2, 4), (3, 4), (4, 6)])
def test_auprc_matches_exhaustive(seed, radius):
    rng = np.random.default_rng(seed)
    s, gt, mask = random_volume(rng, with_mask=seed % 2 == 0)
    got = metrics.auprc_regional(s, gt, radius, mask).area
    assert got == pytest.approx(exhaustive_auprc(s, gt, radius, mask), abs=1e-12)


def test_counts_agree_with_single_threshold_queries():
    rng = np.random.default_rng(7)
    s, gt, _ = random_volume(rng)
    c = metrics.regional_counts(s, gt, 3)
    for i in (1, len(c.thresholds) // 2, len(c.thresholds) - 1):
        t = c.thresholds[i]
        assert metrics.confusion_at_threshold(s, gt, t, 3) == (c.tp[i], c.fp[i], c.fn[i], c.tn[i])


def test_curve_starts_at_recall_zero_precision_one():
    rng = np.random.default_rng(3)
    s, gt, _ = random_volume(rng)
    curve = metrics.auprc_regional(s, gt, 4)
    assert curve.recall[0] == 0.0 and curve.precision[0] == 1.0
    assert np.all(np.diff(curve.recall) >= -1e-15)
    assert curve.points.shape == (len(curve.thresholds), 2)


def test_perfect_scores_give_unit_area():
    gt = np.zeros((10, 10, 10), bool)
    gt[4:6, 4:6, 4:6] = True
    s = gt.astype(float)
    assert metrics.auprc_regional(s, gt, 0).area == pytest.approx(1.0)
    assert metrics.auroc(s, gt) == 1.0


def test_regional_credit_inside_radius():
    gt = np.zeros((12, 12, 12), bool)
    gt[6, 6, 6] = True
    s = np.zeros(gt.shape)
    s[6, 6, 8] = 1.0  # two voxels off the ground truth
    tp, fp, fn, tn = metrics.confusion_at_threshold(s, gt, 1.0, 2)
    assert (tp, fp, fn) == (1, 0, 0)
    tp, fp, fn, tn = metrics.confusion_at_threshold(s, gt, 1.0, 1)
    assert (tp, fp, fn) == (0, 1, 1)


def test_dilated_mode_counts_shell_as_positives():
    gt = np.zeros((9, 9, 9), bool)
    gt[4, 4, 4] = True
    s = gt.astype(float)
    tp, fp, fn, tn = metrics.confusion_at_threshold(s, gt, 1.0, 1, mode=metrics.DILATED)
    assert (tp, fp, fn) == (1, 0, 6)


def test_no_ground_truth_is_undefined():
    with pytest.raises(metrics.UndefinedMetricError):
        metrics.auprc_regional(np.zeros((4, 4, 4)), np.zeros((4, 4, 4), bool), 1)
    with pytest.raises(metrics.UndefinedMetricError):
        metrics.auroc(np.zeros((4, 4, 4)), np.zeros((4, 4, 4), bool))
    with pytest.raises(metrics.UndefinedMetricError):
        metrics.auroc(np.zeros((2, 2, 2)), np.ones((2, 2, 2), bool))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        metrics.regional_counts(np.zeros((4, 4, 4)), np.ones((4, 4, 5), bool), 1)


def test_iou_and_miou():
    gt = np.zeros((4, 4, 4), np.uint16)
    pred = np.zeros_like(gt)
    gt[0, :, :] = 1
    gt[1, :2, :] = 2
    pred[0, :, :] = 1
    pred[1, :, :] = 2
    assert metrics.occupancy_iou(pred, gt) == pytest.approx(24 / 32)
    per, miou = metrics.semantic_miou(pred, gt, [1, 2, 3])
    assert per[1] == 1.0 and per[2] == pytest.approx(0.5)
    assert np.isnan(per[3])
    assert miou == pytest.approx(0.75)


def test_iou_empty_union_is_zero():
    z = np.zeros((3, 3, 3), np.uint16)
    assert metrics.occupancy_iou(z, z) == 0.0
