"""Segmentation losses on the crack-class probability map."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Value, constant

CE_EPS = 1e-7
DICE_EPS = 1e-6


def crack_probability(logits: Value) -> Value:
    """Softmax over the class axis of (B, num_class, H, W) logits, channel 1 kept."""
    return T.softmax(logits, axis=1)[:, 1]


def _target(prob: Value, gt) -> Value:
    gt = constant(np.asarray(gt), like=prob)
    if gt.shape != prob.shape:
        raise DimensionError(f"prediction {prob.shape} and ground truth {gt.shape} differ")
    return gt


def cross_entropy(prob: Value, gt, eps: float = CE_EPS) -> Value:
    """Pixel-mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    y = _target(prob, gt)
    p = T.clip(prob, eps, 1.0 - eps)
    return -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p)).mean()


def dice_loss(prob: Value, gt, eps: float = DICE_EPS) -> Value:
    """
    Soft Dice loss, 1 - (2 sum(p*y) + eps) / (sum(y) + sum(p) + eps).

    Computed per sample over the last two axes and averaged over any leading axes.
    """
    y = _target(prob, gt)
    axes = (-2, -1)
    intersection = (prob * y).sum(axis=axes)
    total = y.sum(axis=axes) + prob.sum(axis=axes)
    return (1.0 - (intersection * 2.0 + eps) / (total + eps)).mean()


def combined_loss(prob: Value, gt, lambda_ce: float = 0.2) -> Value:
    return cross_entropy(prob, gt) * lambda_ce + dice_loss(prob, gt) * (1.0 - lambda_ce)
