"""Segmentation metrics. All reductions are batch-global sums."""

from __future__ import annotations

import numpy as np


def _pair(probs, targets):
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(targets, dtype=np.float64)
    if p.size != g.size:
        raise ValueError(f"shape mismatch: probs {p.shape} vs targets {g.shape}")
    return p.reshape(-1), g.reshape(-1)


def dice_coeff(probs, targets, eps: float = 1.0) -> float:
    p, g = _pair(probs, targets)
    inter = float(p @ g)
    total = float(p.sum() + g.sum())
    if total + eps == 0:
        return 1.0
    return (2 * inter + eps) / (total + eps)


def dice_loss(probs, targets, eps: float = 1.0) -> float:
    return 1.0 - dice_coeff(probs, targets, eps)


def dice_loss_grad(probs: np.ndarray, targets: np.ndarray, eps: float = 1.0):
    """Dice loss and its derivative with respect to ``probs`` (same shape/dtype)."""
    inter = float((probs * targets).sum(dtype=np.float64))
    total = float(probs.sum(dtype=np.float64) + targets.sum(dtype=np.float64))
    den = total + eps
    num = 2 * inter + eps
    grad = -(2 * targets * den - num) / (den * den)
    return 1.0 - num / den, grad.astype(probs.dtype, copy=False)


def jaccard_coeff(probs, targets, eps: float = 1.0) -> float:
    p, g = _pair(probs, targets)
    inter = float(p @ g)
    union = float(p.sum() + g.sum()) - inter
    if union + eps == 0:
        return 1.0
    return (inter + eps) / (union + eps)


def iou_hard(probs, targets, threshold: float = 0.5) -> float:
    p, g = _pair(probs, targets)
    pred = p >= threshold
    truth = g >= 0.5
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & truth) / union


def dice_hard(probs, targets, threshold: float = 0.5) -> float:
    p, g = _pair(probs, targets)
    pred = p >= threshold
    truth = g >= 0.5
    total = np.count_nonzero(pred) + np.count_nonzero(truth)
    if total == 0:
        return 1.0
    return 2 * np.count_nonzero(pred & truth) / total


def binary_accuracy(probs, targets, threshold: float = 0.5) -> float:
    p, g = _pair(probs, targets)
    return float(np.mean((p >= threshold) == (g >= 0.5)))


class MetricAccumulator:
    """Running sums from which every epoch metric is derived."""

    def __init__(self, eps: float = 1.0, threshold: float = 0.5):
        self.eps = eps
        self.threshold = threshold
        self.inter = self.psum = self.gsum = 0.0
        self.tp = self.pred_pos = self.true_pos = self.correct = self.count = 0

    def update(self, probs, targets) -> None:
        p, g = _pair(probs, targets)
        self.inter += float(p @ g)
        self.psum += float(p.sum())
        self.gsum += float(g.sum())
        pred = p >= self.threshold
        truth = g >= 0.5
        self.tp += int(np.count_nonzero(pred & truth))
        self.pred_pos += int(np.count_nonzero(pred))
        self.true_pos += int(np.count_nonzero(truth))
        self.correct += int(np.count_nonzero(pred == truth))
        self.count += p.size

    def result(self) -> dict[str, float]:
        e = self.eps
        dice = (2 * self.inter + e) / (self.psum + self.gsum + e)
        jac = (self.inter + e) / (self.psum + self.gsum - self.inter + e)
        union = self.pred_pos + self.true_pos - self.tp
        hard_total = self.pred_pos + self.true_pos
        return {
            "dice": dice,
            "jaccard": jac,
            "iou": self.tp / union if union else 1.0,
            "binary_accuracy": self.correct / self.count if self.count else 1.0,
            "dice_hard": 2 * self.tp / hard_total if hard_total else 1.0,
            "loss": 1.0 - dice,
        }
