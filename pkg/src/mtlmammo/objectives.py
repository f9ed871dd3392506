"""Losses and evaluation metrics for the two heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor import Tensor, _record
from . import functional as F

Scalar = Union[Tensor, float]


def check_class_weights(w, k: Optional[int] = None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or (k is not None and w.size != k):
        raise ValueError(f"class weights must be a vector of length {k}, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
        raise ValueError(f"class weights must be finite, non-negative, not all zero: {w}")
    return w


def _check_mask(target: np.ndarray, k: int) -> None:
    bad = (target < 0) | (target >= k)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"class index {int(target[loc])} at pixel {loc} outside [0, {k - 1}]")


def weighted_ce(seg_logits: Tensor, target: np.ndarray, weights) -> Tensor:
    """Class-weighted pixel cross-entropy, normalized by the sum of applied weights.

    ``seg_logits`` is [N, K, H, W]; ``target`` holds class indices [N, H, W].
    """
    z = seg_logits.data
    n, k, h, w = z.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {seg_logits.shape}")
    _check_mask(target, k)
    wk = check_class_weights(weights, k).astype(z.dtype)
    t = target.astype(np.intp)

    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    pix_w = wk[t]
    z_norm = pix_w.sum()
    if z_norm <= 0:
        raise ValueError("every pixel has zero class weight; loss is undefined")
    out = np.asarray(-(pix_w * picked).sum() / z_norm, dtype=z.dtype).reshape(1)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1, axis=1)
        grad *= (pix_w / z_norm)[:, None]
        return (grad * g.reshape(()),)

    return _record("weighted_ce", [seg_logits], out, backward)


def bce_with_logit(cls_logit: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits (log-sum-exp stable form)."""
    z = cls_logit.data.reshape(-1)
    y = np.asarray(labels, dtype=z.dtype).reshape(-1)
    if y.shape != z.shape:
        raise ValueError(f"{y.size} labels for {z.size} logits")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    n = z.size
    out = np.asarray((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean(),
                     dtype=z.dtype).reshape(1)
    shape = cls_logit.shape

    def backward(g):
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1 / (1 + e), e / (1 + e))
        return (((p - y) / n * g.reshape(())).reshape(shape).astype(z.dtype, copy=False),)

    return _record("bce_with_logit", [cls_logit], out, backward)


@dataclass
class LossBundle:
    l_cls: Scalar
    l_seg: Scalar
    l_total: Scalar
    lam: float


def joint_loss(l_cls: Scalar, l_seg: Scalar, lam: float) -> LossBundle:
    """Convex combination ``lam * l_cls + (1 - lam) * l_seg``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if isinstance(l_cls, Tensor) or isinstance(l_seg, Tensor):
        total = F.add(F.scale(l_cls, lam), F.scale(l_seg, 1.0 - lam))
    else:
        total = lam * l_cls + (1.0 - lam) * l_seg
    return LossBundle(l_cls, l_seg, total, lam)


# ---- metrics ---------------------------------------------------------------

def dice_counts(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    """Per-class counts [K, 3]: |P_k|, |G_k|, |P_k & G_k|."""
    pred = np.asarray(pred).ravel().astype(np.intp)
    gt = np.asarray(gt).ravel().astype(np.intp)
    p = np.bincount(pred, minlength=k)[:k]
    g = np.bincount(gt, minlength=k)[:k]
    inter = np.bincount(pred[pred == gt], minlength=k)[:k]
    return np.stack([p, g, inter], axis=1)


def dice_from_counts(counts: np.ndarray, absent: str = "exclude") -> tuple[float, np.ndarray]:
    """Mean and per-class Dice from :func:`dice_counts` output.

    Classes empty in both masks get NaN per-class Dice and, with
    ``absent="exclude"``, are left out of the mean; ``absent="one"`` scores
    them 1.0 instead.
    """
    counts = np.asarray(counts, dtype=np.int64)
    denom = counts[:, 0] + counts[:, 1]
    per = np.full(len(counts), np.nan)
    present = denom > 0
    per[present] = 2.0 * counts[present, 2] / denom[present]
    if absent == "one":
        return float(np.where(present, per, 1.0).mean()), per
    if absent != "exclude":
        raise ValueError(f"unknown absent-class rule {absent!r}")
    if not present.any():
        raise ValueError("no class present in either mask")
    return float(per[present].mean()), per


def mean_dice(pred_mask, gt_mask, k: int, absent: str = "exclude") -> tuple[float, np.ndarray]:
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    _check_mask(pred_mask, k)
    _check_mask(gt_mask, k)
    return dice_from_counts(dice_counts(pred_mask, gt_mask, k), absent)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined with a single class present")
    r = average_ranks(s)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_class_weights(masks, k: int = 5) -> np.ndarray:
    """Inverse pixel-frequency weights with a count floor of 1, scaled to sum to K."""
    counts = np.zeros(k, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel().astype(np.intp), minlength=k)[:k]
    total = counts.sum()
    w = total / (k * np.maximum(counts, 1).astype(np.float64))
    return w * (k / w.sum())
