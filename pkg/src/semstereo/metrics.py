"""Disparity and segmentation evaluation metrics.

Undefined cases (no valid/labeled pixels) return None so reports can
mark them explicitly instead of silently producing numbers.
"""

from __future__ import annotations

import numpy as np


def epe(pred, gt, mask=None):
    """Mean absolute disparity error over valid pixels, in px."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"epe: shapes differ, {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        return None
    return float(np.abs(pred - gt)[mask].mean())


def d1_all(pred, gt, mask=None):
    """Percentage of valid pixels with error > 3 px and > 5% of gt."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"d1_all: shapes differ, {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        return None
    err = np.abs(pred - gt)[mask]
    bad = (err > 3.0) & (err > 0.05 * gt[mask])
    return float(bad.mean() * 100.0)


def miou(pred_classes, gt_classes, n_classes: int, ignore_id: int = 255):
    """Mean IoU over classes present in the ground truth, in percent."""
    pred = np.asarray(pred_classes)
    gt = np.asarray(gt_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"miou: shapes differ, {pred.shape} vs {gt.shape}")
    labeled = gt != ignore_id
    if not labeled.any():
        return None
    ious = []
    for cls in range(n_classes):
        gt_c = labeled & (gt == cls)
        if not gt_c.any():
            continue
        pred_c = labeled & (pred == cls)
        inter = (gt_c & pred_c).sum()
        union = (gt_c | pred_c).sum()
        ious.append(inter / union)
    return float(np.mean(ious) * 100.0)


def pixel_acc(pred_classes, gt_classes, ignore_id: int = 255):
    """Fraction of labeled pixels predicted correctly, in percent."""
    pred = np.asarray(pred_classes)
    gt = np.asarray(gt_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"pixel_acc: shapes differ, {pred.shape} vs "
                         f"{gt.shape}")
    labeled = gt != ignore_id
    if not labeled.any():
        return None
    return float((pred[labeled] == gt[labeled]).mean() * 100.0)
