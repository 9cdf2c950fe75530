"""NMS, average precision, and localization-quality statistics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bucketing import Side, layout_from_box, side_centerlines, side_span
from .geometry import Box, iou_matrix

AP_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
DISPLACEMENT_BINS = tuple((round(0.5 + 0.1 * i, 1), round(0.6 + 0.1 * i, 1)) for i in range(5))
IMPROVEMENT_BINS = tuple((round(0.3 + 0.1 * i, 1), round(0.4 + 0.1 * i, 1)) for i in range(7))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    loc_confidence: float = 1.0

    def __post_init__(self):
        for v in (self.score, self.loc_confidence):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"value out of [0, 1]: {v}")


def _rank(scores: np.ndarray) -> np.ndarray:
    # descending score, lower index first on ties
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = 0.5) -> list[int]:
    """Greedy NMS. Returns kept indices in selection order."""
    if not 0.0 < iou_thr < 1.0:
        raise ValueError("iou_thr must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return []
    order = _rank(scores)
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thr
    return keep


def rescoring_nms(boxes, scores, loc_confidences, iou_thr: float = 0.5) -> tuple[list[int], np.ndarray]:
    """NMS ranked by ``score * loc_confidence``; returns ``(kept, rescored scores)``."""
    rescored = np.asarray(scores, dtype=np.float64) * np.asarray(loc_confidences, dtype=np.float64)
    return nms(boxes, rescored, iou_thr), rescored


@dataclass(frozen=True)
class APResult:
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    iou_thr: float


def match_detections(det_boxes, det_scores, gt_boxes, iou_thr):
    """Greedy score-ordered matching for one image. Returns TP flags in rank order
    and the ranked scores."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = _rank(det_scores)
    tp = np.zeros(len(order), dtype=bool)
    if len(gt_boxes) and len(order):
        ious = iou_matrix(det_boxes[order], gt_boxes)
        taken = np.zeros(len(gt_boxes), dtype=bool)
        for r in range(len(order)):
            cand = np.where(taken, -1.0, ious[r])
            j = int(np.argmax(cand))
            if cand[j] >= iou_thr:
                taken[j] = True
                tp[r] = True
    return tp, np.asarray(det_scores, dtype=np.float64)[order]


def average_precision(
    dets: Sequence[tuple[np.ndarray, np.ndarray]],
    gts: Sequence[np.ndarray],
    iou_thr: float = 0.5,
) -> APResult:
    """101-point interpolated AP over a set of images.

    ``dets[i]`` is ``(boxes [M, 4], scores [M])`` for image ``i``.
    """
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts)
    tps, scores, img_ids, ranks = [], [], [], []
    for img, ((boxes, sc), g) in enumerate(zip(dets, gts)):
        tp, s = match_detections(boxes, sc, g, iou_thr)
        tps.append(tp)
        scores.append(s)
        img_ids.append(np.full(len(tp), img))
        ranks.append(np.arange(len(tp)))
    if n_gt == 0 or not tps or sum(len(t) for t in tps) == 0:
        return APResult(0.0, np.zeros(0), np.zeros(0), iou_thr)
    tp = np.concatenate(tps)
    sc = np.concatenate(scores)
    order = np.lexsort((np.concatenate(ranks), np.concatenate(img_ids), -sc))
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return APResult(float(interp.mean()), precision, recall, iou_thr)


def _bin_index(value: float, bins) -> int | None:
    for i, (lo, hi) in enumerate(bins):
        last = i == len(bins) - 1
        if lo <= value < hi or (last and value == hi):
            return i
    return None


def nearest_gt(boxes: np.ndarray, gts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and IoU of the max-IoU gt for each box (lower index on ties)."""
    ious = iou_matrix(boxes, gts)
    j = np.argmax(ious, axis=1)
    return j, ious[np.arange(len(boxes)), j]


def iou_improvement_stats(proposals, refined, gts, bins=IMPROVEMENT_BINS) -> list[dict]:
    """Mean IoU before/after refinement, grouped by proposal IoU.

    Arguments are per-image lists of ``[N, 4]`` arrays. Empty bins are omitted.
    """
    before = [[] for _ in bins]
    after = [[] for _ in bins]
    for p, r, g in zip(proposals, refined, gts):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 4)
        r = np.asarray(r, dtype=np.float64).reshape(-1, 4)
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        if len(p) == 0 or len(g) == 0:
            continue
        j, v = nearest_gt(p, g)
        post = iou_matrix(r, g)[np.arange(len(r)), j]
        for vb, va in zip(v, post):
            b = _bin_index(vb, bins)
            if b is not None:
                before[b].append(vb)
                after[b].append(va)
    rows = []
    for (lo, hi), bb, aa in zip(bins, before, after):
        if bb:
            rows.append({"bin_lo": lo, "bin_hi": hi, "count": len(bb),
                         "iou_before": float(np.mean(bb)), "iou_after": float(np.mean(aa))})
    return rows


def positive_count_stats(refined, gts, thresholds=(0.5, 0.6, 0.7, 0.8, 0.9)) -> list[dict]:
    """Mean number of boxes per image whose best IoU with a gt reaches each threshold."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    best = []
    for r, g in zip(refined, gts):
        r = np.asarray(r, dtype=np.float64).reshape(-1, 4)
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        best.append(iou_matrix(r, g).max(axis=1) if len(r) and len(g) else np.zeros(len(r)))
    n_img = max(len(best), 1)
    return [{"threshold": t, "mean_count": float(sum(int((b >= t).sum()) for b in best)) / n_img}
            for t in thresholds]


@dataclass
class DisplacementStats:
    rows: list[dict]
    excluded_out_of_range: int
    max_bound_excess: float
    n_samples: int


def displacement_stats(proposals, gts, sigma: float = 1.7, k: int = 7, iou_bins=DISPLACEMENT_BINS) -> DisplacementStats:
    """Left-boundary displacement moments, raw versus bucket-relative.

    ``proposals`` and ``gts`` are matched ``[N, 4]`` arrays. Raw displacement
    is ``(gt.x1 - proposal.x1) / gt_width``; the bucketed one replaces the
    proposal edge with the nearest left-side bucket centerline. Pairs below
    IoU 0.5 are dropped, as are pairs whose gt edge lies outside the left half
    of the candidate region (they carry no bucketing target).
    """
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    raw = [[] for _ in iou_bins]
    buck = [[] for _ in iou_bins]
    excluded = 0
    excess = -np.inf
    used = 0
    for pb, gb in zip(p, g):
        v = iou_matrix(pb, gb)[0, 0]
        if v < 0.5:
            continue
        b = _bin_index(v, iou_bins)
        if b is None:
            continue
        prop = Box.from_seq(pb)
        xl, _ = layout_from_box(prop, sigma, k)
        lo, hi = side_span(xl, Side.LEFT)
        if not lo <= gb[0] <= hi:
            excluded += 1
            continue
        centers = side_centerlines(xl, Side.LEFT)
        c = centers[int(np.argmin(np.abs(gb[0] - centers)))]
        gw = gb[2] - gb[0]
        res = (gb[0] - c) / gw
        excess = max(excess, abs(gb[0] - c) - 0.5 * xl.bucket_width)
        raw[b].append((gb[0] - pb[0]) / gw)
        buck[b].append(res)
        used += 1
    rows = []
    for (lo, hi), rr, bb in zip(iou_bins, raw, buck):
        if rr:
            rows.append({"bin": f"[{lo:.1f},{hi:.1f})", "count": len(rr),
                         "raw_mean": float(np.mean(rr)), "raw_var": float(np.var(rr)),
                         "bucket_mean": float(np.mean(bb)), "bucket_var": float(np.var(bb))})
    return DisplacementStats(rows, excluded, float(excess) if used else 0.0, used)
