"""AuROC, regional AuPRC and occupancy IoU/mIoU on voxel volumes.

Regional counting at threshold ``t`` with dilated ground truth ``D``:

* TP_r: predicted voxels (score >= t) inside ``D``
* FP_r: predicted voxels outside ``D``
* FN_r: ground-truth voxels with no predicted voxel within the radius
* TN_r: unpredicted voxels outside ``D``; the unpredicted part of the shell
  ``D \\ GT`` is ignored

Curves run from the strictest threshold to the loosest and are integrated with
the trapezoid rule. The empty prediction at the top contributes the point
(recall 0, precision 1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

REGIONAL = "regional"
DILATED = "dilated"


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    area: float

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.fpr, self.tpr], axis=1)


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    area: float
    radius_voxels: int

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.recall, self.precision], axis=1)


@dataclass
class RegionalCounts:
    thresholds: np.ndarray  # descending, starting at +inf
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray


def _as_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"evaluation mask shape {mask.shape} != volume shape {tuple(shape)}")
    return mask


def _scores(scores) -> np.ndarray:
    return np.asarray(getattr(scores, "scores", scores), dtype=np.float64)


def ball_offsets(radius: int) -> np.ndarray:
    """Integer offsets with Euclidean norm <= radius, shape (M, 3)."""
    r = int(radius)
    g = np.arange(-r, r + 1)
    d = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return d[(d ** 2).sum(axis=1) <= r * r]


def dilate_labels(gt_anomaly: np.ndarray, radius_voxels: int) -> np.ndarray:
    """Voxels within Euclidean distance ``radius_voxels`` of any positive voxel."""
    if radius_voxels < 0:
        raise ValueError("dilation radius must be >= 0")
    gt = np.asarray(gt_anomaly, dtype=bool)
    if radius_voxels == 0 or not gt.any():
        return gt.copy()
    # squared distances are integers, so compare them exactly
    dist2 = ndimage.distance_transform_edt(~gt, return_distances=True) ** 2
    return np.rint(dist2) <= radius_voxels * radius_voxels


def _cover_scores(scores: np.ndarray, mask: np.ndarray, gt_idx: np.ndarray, radius: int, chunk: int = 4096) -> np.ndarray:
    """Highest masked score within ``radius`` of each ground-truth voxel."""
    r = int(radius)
    padded = np.pad(np.where(mask, scores, -np.inf), r, constant_values=-np.inf)
    offs = ball_offsets(r)
    out = np.empty(len(gt_idx))
    for start in range(0, len(gt_idx), chunk):
        c = gt_idx[start:start + chunk] + r
        pts = c[:, None, :] + offs[None, :, :]
        out[start:start + chunk] = padded[pts[..., 0], pts[..., 1], pts[..., 2]].max(axis=1)
    return out


def regional_counts(scores, gt_anomaly, radius_voxels: int, mask=None, mode: str = REGIONAL) -> RegionalCounts:
    s_all = _scores(scores)
    gt = np.asarray(gt_anomaly, dtype=bool)
    if s_all.shape != gt.shape:
        raise ValueError(f"score shape {s_all.shape} != ground-truth shape {gt.shape}")
    m = _as_mask(mask, gt.shape)
    gt = gt & m
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise UndefinedMetricError("no ground-truth anomaly voxels inside the evaluation mask")
    D = dilate_labels(gt, radius_voxels) & m

    s = s_all[m]
    in_d = D[m]
    uniq, inv = np.unique(s, return_inverse=True)
    uniq = uniq[::-1]
    inv = len(uniq) - 1 - inv
    tp = np.cumsum(np.bincount(inv, weights=in_d, minlength=len(uniq)))
    pred = np.cumsum(np.bincount(inv, minlength=len(uniq)))
    fp = pred - tp
    n_out = int((~in_d).sum())

    if mode == REGIONAL:
        cover = np.sort(_cover_scores(s_all, m, np.argwhere(gt), radius_voxels))
        covered = len(cover) - np.searchsorted(cover, uniq, side="left")
        fn = n_gt - covered
        n_fn0 = n_gt
    elif mode == DILATED:
        fn = int(D.sum()) - tp
        n_fn0 = int(D.sum())
    else:
        raise ValueError(f"unknown counting mode {mode!r}")
    tn = n_out - fp

    thresholds = np.concatenate([[np.inf], uniq])
    return RegionalCounts(
        thresholds=thresholds,
        tp=np.concatenate([[0], tp]).astype(np.int64),
        fp=np.concatenate([[0], fp]).astype(np.int64),
        fn=np.concatenate([[n_fn0], fn]).astype(np.int64),
        tn=np.concatenate([[n_out], tn]).astype(np.int64),
    )


def confusion_at_threshold(scores, gt_anomaly, threshold: float, radius_voxels: int, mask=None, mode: str = REGIONAL) -> Tuple[int, int, int, int]:
    """(TP_r, FP_r, FN_r, TN_r) when voxels scoring >= ``threshold`` are predicted."""
    s = _scores(scores)
    gt = np.asarray(gt_anomaly, dtype=bool)
    m = _as_mask(mask, gt.shape)
    gt = gt & m
    D = dilate_labels(gt, radius_voxels) & m
    pred = (s >= threshold) & m
    tp = int((pred & D).sum())
    fp = int((pred & ~D).sum())
    tn = int((m & ~D & ~pred).sum())
    if mode == REGIONAL:
        if gt.any():
            cover = _cover_scores(s, m, np.argwhere(gt), radius_voxels)
            fn = int((cover < threshold).sum())
        else:
            fn = 0
    elif mode == DILATED:
        fn = int((D & ~pred).sum())
    else:
        raise ValueError(f"unknown counting mode {mode!r}")
    return tp, fp, fn, tn


def precision_recall(tp, fp, fn) -> Tuple[np.ndarray, np.ndarray]:
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
    return precision, recall


def auprc_regional(scores, gt_anomaly, radius_voxels: int, mask=None, mode: str = REGIONAL) -> PrCurve:
    c = regional_counts(scores, gt_anomaly, radius_voxels, mask, mode)
    precision, recall = precision_recall(c.tp, c.fp, c.fn)
    area = float(trapezoid(precision, recall))
    return PrCurve(recall, precision, c.thresholds, area, int(radius_voxels))


def roc_curve(scores, gt_anomaly, mask=None) -> RocCurve:
    s = _scores(scores)
    gt = np.asarray(gt_anomaly, dtype=bool)
    m = _as_mask(mask, gt.shape)
    y = gt[m]
    s = s[m]
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AuROC needs at least one positive and one negative voxel")
    uniq, inv = np.unique(s, return_inverse=True)
    uniq = uniq[::-1]
    inv = len(uniq) - 1 - inv
    tp = np.cumsum(np.bincount(inv, weights=y, minlength=len(uniq)))
    fp = np.cumsum(np.bincount(inv, minlength=len(uniq))) - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return RocCurve(fpr, tpr, np.concatenate([[np.inf], uniq]), float(trapezoid(tpr, fpr)))


def auroc(scores, gt_anomaly, mask=None) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = _scores(scores)
    gt = np.asarray(gt_anomaly, dtype=bool)
    m = _as_mask(mask, gt.shape)
    y = gt[m]
    s = s[m]
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AuROC needs at least one positive and one negative voxel")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def occupancy_iou(pred, gt, mask=None, free_class: int | None = None) -> float:
    """IoU of occupied (non-free) voxels."""
    p_lab, g_lab = _labels(pred), _labels(gt)
    free = free_class if free_class is not None else getattr(gt, "free_class", 0)
    m = _as_mask(mask, g_lab.shape)
    p = (p_lab != free) & m
    g = (g_lab != free) & m
    union = int((p | g).sum())
    if union == 0:
        logger.warning("occupancy IoU on an empty union; reported as 0")
        return 0.0
    return int((p & g).sum()) / union


def semantic_miou(pred, gt, classes: Sequence[int], mask=None) -> Tuple[Dict[int, float], float]:
    """Per-class IoU and their mean over classes present in the ground truth.

    Classes absent from the ground truth get NaN and are left out of the mean.
    """
    p_lab, g_lab = _labels(pred), _labels(gt)
    m = _as_mask(mask, g_lab.shape)
    p, g = p_lab[m], g_lab[m]
    per_class: Dict[int, float] = {}
    for c in classes:
        gc = g == c
        pc = p == c
        if not gc.any():
            per_class[int(c)] = float("nan")
            continue
        per_class[int(c)] = int((gc & pc).sum()) / int((gc | pc).sum())
    present = [v for v in per_class.values() if not np.isnan(v)]
    miou = float(np.mean(present)) if present else float("nan")
    return per_class, miou


def _labels(grid) -> np.ndarray:
    return np.asarray(getattr(grid, "labels", grid))
