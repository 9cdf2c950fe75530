"""Bucketing, fine-regression and objectness losses with analytic gradients.

Reductions are means over the contributing entries. An empty reduction
yields 0 with count 0 instead of NaN.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bucketing import SIDES, BoxTargets
from .ndmath import sigmoid


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    cls: float
    bucketing: float
    reg: float
    total: float
    n_cls: int = 0
    n_bucketing: int = 0
    n_reg: int = 0


@dataclass(frozen=True)
class TargetArrays:
    """Stacked per-side targets for a batch: all arrays are ``[N, 4, k]``
    except ``in_range`` which is ``[N, 4]``. Labels use 1/0/-1 for
    positive/negative/ignore."""

    labels: np.ndarray
    offsets: np.ndarray
    offset_valid: np.ndarray
    in_range: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "TargetArrays":
        return TargetArrays(self.labels[idx], self.offsets[idx], self.offset_valid[idx], self.in_range[idx])


def stack_targets(targets: Sequence[BoxTargets] | BoxTargets) -> TargetArrays:
    if isinstance(targets, BoxTargets):
        targets = [targets]
    labels = np.array([[t[s].label_array() for s in SIDES] for t in targets], dtype=np.int64)
    offsets = np.array([[t[s].offsets for s in SIDES] for t in targets], dtype=np.float64)
    valid = np.array([[t[s].offset_valid for s in SIDES] for t in targets], dtype=bool)
    in_range = np.array([[t[s].in_range for s in SIDES] for t in targets], dtype=bool)
    return TargetArrays(labels, offsets, valid, in_range)


def bce_with_logits(logit, label):
    """Stable binary cross-entropy on raw logits. Works elementwise on arrays.

    Returns ``(loss, dloss/dlogit)``.
    """
    logit = np.asarray(logit, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    z = (2.0 * label - 1.0) * logit
    loss = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    grad = sigmoid(logit) - label
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def smooth_l1(pred, target, beta: float = 1.0):
    """Huber-style loss ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - beta/2`` outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    inside = ad < beta
    loss = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(inside, d / beta, np.sign(d))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def bucketing_loss(
    targets: TargetArrays,
    logits: np.ndarray,
    out_of_range_negative: bool = False,
) -> tuple[float, np.ndarray, int]:
    """Mean BCE over non-ignored buckets.

    Sides whose gt edge fell outside the candidate region are skipped unless
    ``out_of_range_negative`` is set, in which case all their buckets count as
    negatives. ``logits`` is ``[N, 4, k]``. Returns ``(loss, dloss/dlogits, count)``.
    """
    if logits.shape != targets.labels.shape:
        raise ValueError(f"logits {logits.shape} vs labels {targets.labels.shape}")
    mask = targets.labels >= 0
    if not out_of_range_negative:
        mask = mask & targets.in_range[..., None]
    count = int(mask.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad, 0
    loss, g = bce_with_logits(logits, np.clip(targets.labels, 0, 1))
    total = float(np.sum(loss[mask])) / count
    grad[mask] = g[mask] / count
    return total, grad, count


def regression_loss(targets: TargetArrays, offsets: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray, int]:
    """Mean Smooth-L1 over offset slots marked valid."""
    if offsets.shape != targets.offsets.shape:
        raise ValueError(f"offsets {offsets.shape} vs targets {targets.offsets.shape}")
    mask = targets.offset_valid
    count = int(mask.sum())
    grad = np.zeros_like(offsets)
    if count == 0:
        return 0.0, grad, 0
    loss, g = smooth_l1(offsets, targets.offsets, beta)
    total = float(np.sum(loss[mask])) / count
    grad[mask] = g[mask] / count
    return total, grad, count


def delta_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, beta: float = 1.0):
    """Mean Smooth-L1 over ``[N, 4]`` regression deltas of rows selected by ``mask``."""
    rows = np.broadcast_to(np.asarray(mask, dtype=bool)[:, None], pred.shape)
    count = int(rows.sum())
    grad = np.zeros_like(pred)
    if count == 0:
        return 0.0, grad, 0
    loss, g = smooth_l1(pred, target, beta)
    grad[rows] = g[rows] / count
    return float(np.sum(loss[rows])) / count, grad, count


def objectness_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, int]:
    n = logits.size
    if n == 0:
        return 0.0, np.zeros_like(logits), 0
    loss, g = bce_with_logits(logits, labels)
    return float(np.sum(loss)) / n, g / n, n


def total_loss(cls_loss: float, bucketing: float, reg: float, w: LossWeights = LossWeights()) -> float:
    """Composite objective; the proposal-network term is absent so ``lambda1`` multiplies 0."""
    rpn = 0.0
    return w.lambda1 * rpn + cls_loss + w.lambda2 * (bucketing + reg)


LOG_COLUMNS = ("epoch", "cls", "bucketing", "reg", "total")


def write_loss_log(path: str | Path, rows: Sequence[tuple[int, LossReport]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for epoch, r in rows:
            writer.writerow([epoch, repr(r.cls), repr(r.bucketing), repr(r.reg), repr(r.total)])


