"""Multi-task training objective.

Per stage the objective combines a smooth-L1 disparity term, a
class-weighted multi-class cross entropy and a smooth-L1 term on the
refined disparity, then applies the double hierarchical weighting: stage
weights (1/4, 1/2, 1) times task weights (1, 2, 2). Class weights come
from per-class pixel probabilities through natural logs; losses over
coarsely annotated samples are inflated according to their unlabeled
area fraction (factor 1 + gamma * unlabeled/labeled, gamma 0.1).

Ground truth supervises each stage at the stage's own scale: disparity
targets are nearest-neighbor downsampled and divided by the scale,
class targets are nearest-neighbor downsampled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffops import ShapeError, Tensor, add, scale as scale_op, _result


@dataclass
class LossWeights:
    stage: tuple = (0.25, 0.5, 1.0)
    disparity: float = 1.0
    semantic: float = 2.0
    refined: float = 2.0
    gamma: float = 0.1
    k: float = 2.0

    def __post_init__(self):
        vals = list(self.stage) + [self.disparity, self.semantic,
                                   self.refined, self.gamma, self.k]
        if any(v <= 0 for v in vals):
            raise ValueError("LossWeights: all weights must be positive")


@dataclass
class ClassStats:
    """Per-class pixel probability over a training set."""
    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if np.any(self.p < 0) or self.p.sum() > 1 + 1e-9:
            raise ValueError("ClassStats: probabilities must be >= 0 and "
                             "sum to at most 1")

    @property
    def n(self) -> int:
        return int(self.p.shape[0])


def smooth_l1(pred: Tensor, gt, valid=None) -> Tensor:
    """0.5 e^2 below |e|=1, |e|-0.5 above, averaged over valid pixels."""
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"smooth_l1: prediction {pred.shape} vs ground "
                         f"truth {gt.shape}")
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != gt.shape:
        raise ShapeError(f"smooth_l1: mask {valid.shape} vs {gt.shape}")
    n = int(valid.sum())
    if n == 0:
        warnings.warn("smooth_l1: empty valid mask, loss defined as 0")
        return Tensor(np.asarray(0.0, dtype=pred.dtype))
    e = pred.data - gt
    ae = np.abs(e)
    quad = ae < 1
    per = np.where(quad, pred.dtype.type(0.5) * e * e,
                   ae - pred.dtype.type(0.5))
    value = per[valid].sum(dtype=pred.dtype) / pred.dtype.type(n)

    def bwd(g):
        de = np.where(quad, e, np.sign(e)) * (valid / pred.dtype.type(n))
        pred._accum(g * de.astype(pred.dtype))

    return _result(np.asarray(value), (pred,), bwd, "smooth_l1",
                   6 * pred.data.size)


def class_weights(stats: ClassStats, k: float) -> np.ndarray:
    """W_j = N / (ln(P_j + k) * sum_i 1/ln(P_i + k)); weights sum to N."""
    logs = np.log(stats.p + k)
    bad = np.nonzero(logs <= 0)[0]
    if bad.size:
        raise ValueError(f"class_weights: ln(P + k) <= 0 for class "
                         f"{int(bad[0])} (P={stats.p[bad[0]]:.4g}, k={k})")
    return stats.n / (logs * (1.0 / logs).sum())


def weighted_cross_entropy(logits: Tensor, gt_classes, weights,
                           ignore_id: int = 255, sample_scale=None,
                           per_sample: bool = False) -> Tensor:
    """Mean over labeled pixels of -W[gt] * log softmax(logits)[gt].

    With ``per_sample`` the mean is taken within each sample first (and
    optionally scaled by ``sample_scale``), then across samples that have
    at least one labeled pixel; this is how coarse-annotation reweighting
    enters training.
    """
    gt = np.asarray(gt_classes)
    weights = np.asarray(weights, dtype=logits.dtype)
    b, n_cls = logits.shape[0], logits.shape[1]
    if gt.shape != (b,) + logits.shape[2:]:
        raise ShapeError(f"weighted_cross_entropy: targets {gt.shape} vs "
                         f"logits {logits.shape}")
    if weights.shape != (n_cls,):
        raise ShapeError(f"weighted_cross_entropy: {weights.shape[0]} weights "
                         f"for {n_cls} classes")
    labeled = gt != ignore_id
    safe_gt = np.where(labeled, gt, 0)
    if np.any((safe_gt < 0) | (safe_gt >= n_cls)):
        raise ShapeError("weighted_cross_entropy: class id out of range")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    gt_idx = safe_gt[:, None]
    logp_gt = np.take_along_axis(logp, gt_idx, axis=1)[:, 0]
    w_pix = weights[safe_gt] * labeled

    # per-pixel normalization coefficients, also reused by the backward
    coeff = np.zeros(gt.shape, dtype=logits.dtype)
    if per_sample:
        counts = labeled.reshape(b, -1).sum(axis=1)
        present = counts > 0
        if not np.any(present):
            warnings.warn("weighted_cross_entropy: no labeled pixels, "
                          "loss defined as 0")
            return Tensor(np.asarray(0.0, dtype=logits.dtype))
        scales = np.ones(b) if sample_scale is None else np.asarray(sample_scale)
        denom = counts.astype(np.float64)
        denom[~present] = 1.0
        per_b = (scales / denom / present.sum())
        coeff[...] = per_b.reshape((b,) + (1,) * (gt.ndim - 1))
        coeff[~labeled] = 0
    else:
        total = int(labeled.sum())
        if total == 0:
            warnings.warn("weighted_cross_entropy: no labeled pixels, "
                          "loss defined as 0")
            return Tensor(np.asarray(0.0, dtype=logits.dtype))
        coeff[labeled] = 1.0 / total
    value = -(w_pix * coeff * logp_gt).sum(dtype=np.float64)

    def bwd(g):
        soft = np.exp(logp)
        cw = (w_pix * coeff)[:, None]
        dlogits = soft * cw
        sub = np.take_along_axis(dlogits, gt_idx, axis=1) - cw
        np.put_along_axis(dlogits, gt_idx, sub, axis=1)
        logits._accum((g * dlogits).astype(logits.dtype))

    return _result(np.asarray(value, dtype=logits.dtype), (logits,), bwd,
                   "cross_entropy", 8 * logits.data.size)


def coarse_reweight(loss, a_unlab: float, a_tot: float, gamma: float):
    """Scale a loss by 1 + gamma * unlabeled/(total - unlabeled)."""
    if not 0 <= a_unlab < a_tot:
        raise ValueError(f"coarse_reweight: unlabeled area {a_unlab} must be "
                         f"in [0, total={a_tot})")
    factor = 1.0 + gamma * (a_unlab / (a_tot - a_unlab))
    if isinstance(loss, Tensor):
        return scale_op(loss, factor)
    return loss * factor


def total_loss(stage_losses, w: LossWeights) -> Tensor:
    """Sum over stages of W_st * (W_d L_d + W_s L_s + W_dr L_dr).

    ``stage_losses`` holds one (L_d, L_s, L_dr) triple per stage; a None
    entry (masked stage or task, e.g. for ablations) contributes 0.
    """
    if len(stage_losses) != len(w.stage):
        raise ValueError(f"total_loss: {len(stage_losses)} stages for "
                         f"{len(w.stage)} stage weights")
    total = None
    for w_st, triple in zip(w.stage, stage_losses):
        if triple is None:
            continue
        l_d, l_s, l_dr = triple
        for w_task, term in ((w.disparity, l_d), (w.semantic, l_s),
                             (w.refined, l_dr)):
            if term is None:
                continue
            if not isinstance(term, Tensor):
                term = Tensor(np.asarray(term, dtype=np.float64))
            piece = scale_op(term, w_st * w_task)
            total = piece if total is None else add(total, piece)
    if total is None:
        raise ValueError("total_loss: every stage masked out")
    return total


# ---------------------------------------------------------------------------
# stage supervision helpers

def stage_disparity_target(disp_gt, valid, factor: int):
    """Nearest-neighbor downsample; values rescale with the grid."""
    sub = disp_gt[:, :, ::factor, ::factor] / factor
    return sub.astype(disp_gt.dtype), valid[:, :, ::factor, ::factor]


def stage_class_target(sem_gt, factor: int):
    return sem_gt[:, ::factor, ::factor]


def coarse_factors(sem_gt, ignore_id: int, gamma: float) -> np.ndarray:
    """Per-sample reweighting factors from the unlabeled area fraction."""
    b = sem_gt.shape[0]
    out = np.ones(b)
    flat = sem_gt.reshape(b, -1)
    a_tot = flat.shape[1]
    for i in range(b):
        a_unlab = int((flat[i] == ignore_id).sum())
        if a_unlab < a_tot:
            out[i] = coarse_reweight(1.0, a_unlab, a_tot, gamma)
    return out


def multi_task_loss(outputs, disp_gt, disp_valid, sem_gt, w: LossWeights,
                    cls_weights, ignore_id: int = 255):
    """Assemble the full objective for one batch.

    ``outputs`` is the stage list from the network; ground truth comes at
    full resolution (disp_gt B x 1 x H x W, sem_gt B x H x W). Returns
    the scalar loss tensor and a per-stage breakdown of floats.
    """
    triples = []
    parts = {}
    for out in outputs:
        f = out.scale
        d_gt, d_valid = stage_disparity_target(disp_gt, disp_valid, f)
        s_gt = stage_class_target(sem_gt, f)
        l_d = smooth_l1(out.disparity.disparity, d_gt, d_valid)
        l_s = weighted_cross_entropy(
            out.logits.scores, s_gt, cls_weights, ignore_id,
            sample_scale=coarse_factors(s_gt, ignore_id, w.gamma),
            per_sample=True)
        l_dr = None
        if out.refined is not None:
            l_dr = smooth_l1(out.refined, d_gt, d_valid)
        stage_no = len(triples) + 1
        parts[f"d{stage_no}"] = float(l_d.data)
        parts[f"s{stage_no}"] = float(l_s.data)
        parts[f"r{stage_no}"] = float(l_dr.data) if l_dr is not None else 0.0
        triples.append((l_d, l_s, l_dr))
    while len(triples) < len(w.stage):
        triples.append(None)
    loss = total_loss(triples, w)
    return loss, parts
