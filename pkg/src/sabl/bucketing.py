"""Bucket layouts, boundary target encoding and prediction decoding.

Each axis of the scaled candidate region is cut into ``2k`` equal buckets,
indexed 0..2k-1 in ascending coordinate. The left (top) boundary owns buckets
``0..k-1`` and the right (down) boundary owns ``k..2k-1``. Ties between
equidistant buckets always go to the lower index.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, iou_matrix, scale_about_center


class Axis(str, enum.Enum):
    X = "x"
    Y = "y"


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    TOP = "top"
    DOWN = "down"

    @property
    def axis(self) -> Axis:
        return Axis.X if self in (Side.LEFT, Side.RIGHT) else Axis.Y

    @property
    def upper(self) -> bool:
        """True for the side that owns the upper half of the buckets."""
        return self in (Side.RIGHT, Side.DOWN)


SIDES = (Side.LEFT, Side.RIGHT, Side.TOP, Side.DOWN)


class Label(str, enum.Enum):
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"
    IGNORE = "IGNORE"


@dataclass(frozen=True)
class AxisLayout:
    lo: float
    bucket_width: float
    k: int
    axis: Axis

    def __post_init__(self):
        if not self.bucket_width > 0:
            raise ValueError(f"bucket width must be positive, got {self.bucket_width}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")

    @property
    def hi(self) -> float:
        return self.lo + 2 * self.k * self.bucket_width

    def centerlines(self) -> np.ndarray:
        """Centerlines of all ``2k`` buckets."""
        return self.lo + (np.arange(2 * self.k) + 0.5) * self.bucket_width

    def to_dict(self) -> dict:
        return {"lo": self.lo, "bucket_width": self.bucket_width, "k": self.k, "axis": self.axis.value}


@dataclass(frozen=True)
class SideTargets:
    labels: tuple[Label, ...]
    offsets: np.ndarray
    offset_valid: np.ndarray
    in_range: bool

    @property
    def positive_index(self) -> int | None:
        for i, lab in enumerate(self.labels):
            if lab is Label.POSITIVE:
                return i
        return None

    def label_array(self) -> np.ndarray:
        """1 for positive, 0 for negative, -1 for ignore."""
        m = {Label.POSITIVE: 1, Label.NEGATIVE: 0, Label.IGNORE: -1}
        return np.array([m[lab] for lab in self.labels], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "labels": [lab.value for lab in self.labels],
            "offsets": [float(v) for v in self.offsets],
            "offset_valid": [bool(v) for v in self.offset_valid],
            "in_range": self.in_range,
        }


@dataclass(frozen=True)
class SidePrediction:
    confidences: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.confidences, dtype=np.float64)
        o = np.asarray(self.offsets, dtype=np.float64)
        if c.ndim != 1 or c.shape != o.shape:
            raise ValueError(f"confidence/offset shapes differ: {c.shape} vs {o.shape}")
        object.__setattr__(self, "confidences", c)
        object.__setattr__(self, "offsets", o)

    @classmethod
    def from_dict(cls, d: dict) -> "SidePrediction":
        return cls(np.asarray(d["confidences"], float), np.asarray(d["offsets"], float))


@dataclass(frozen=True)
class BoxTargets:
    sides: dict[Side, SideTargets]
    x_layout: AxisLayout
    y_layout: AxisLayout

    def __getitem__(self, side: Side) -> SideTargets:
        return self.sides[side]

    @property
    def all_in_range(self) -> bool:
        return all(t.in_range for t in self.sides.values())

    def to_dict(self) -> dict:
        return {
            "x_layout": self.x_layout.to_dict(),
            "y_layout": self.y_layout.to_dict(),
            "sides": {s.value: self.sides[s].to_dict() for s in SIDES},
        }


@dataclass(frozen=True)
class DecodedBox:
    box: Box
    loc_confidence: float
    degenerate: bool = False


def layout_from_box(b: Box, sigma: float, k: int) -> tuple[AxisLayout, AxisLayout]:
    if b.is_degenerate():
        raise ValueError("degenerate proposal")
    if sigma < 1:
        raise ValueError(f"sigma must be >= 1, got {sigma}")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    region = scale_about_center(b, sigma)
    x = AxisLayout(region.x1, sigma * b.width / (2 * k), k, Axis.X)
    y = AxisLayout(region.y1, sigma * b.height / (2 * k), k, Axis.Y)
    return x, y


def _check_side(layout: AxisLayout, side: Side) -> None:
    if side.axis is not layout.axis:
        raise ValueError(f"side {side.value} does not belong to axis {layout.axis.value}")


def side_centerlines(layout: AxisLayout, side: Side) -> np.ndarray:
    _check_side(layout, side)
    start = layout.k if side.upper else 0
    return layout.lo + (start + np.arange(layout.k) + 0.5) * layout.bucket_width


def side_span(layout: AxisLayout, side: Side) -> tuple[float, float]:
    """Half of the candidate region owned by ``side``."""
    _check_side(layout, side)
    start = layout.k if side.upper else 0
    lo = layout.lo + start * layout.bucket_width
    return lo, lo + layout.k * layout.bucket_width


def encode_side(
    layout: AxisLayout,
    side: Side,
    gt_boundary: float,
    use_ignore: bool = True,
    use_top2: bool = True,
) -> SideTargets:
    k = layout.k
    centers = side_centerlines(layout, side)
    offsets = np.zeros(k)
    valid = np.zeros(k, dtype=bool)
    lo, hi = side_span(layout, side)
    if not lo <= gt_boundary <= hi:
        return SideTargets((Label.NEGATIVE,) * k, offsets, valid, False)

    order = np.argsort(np.abs(gt_boundary - centers), kind="stable")
    nearest, second = int(order[0]), int(order[1])
    labels = [Label.NEGATIVE] * k
    labels[nearest] = Label.POSITIVE
    if use_ignore:
        labels[second] = Label.IGNORE
    regressed = (nearest, second) if use_top2 else (nearest,)
    for i in regressed:
        offsets[i] = (gt_boundary - centers[i]) / layout.bucket_width
        valid[i] = True
    return SideTargets(tuple(labels), offsets, valid, True)


def encode_box(
    proposal: Box,
    gt: Box,
    sigma: float,
    k: int,
    use_ignore: bool = True,
    use_top2: bool = True,
) -> BoxTargets:
    if gt.is_degenerate():
        raise ValueError("degenerate ground truth")
    xl, yl = layout_from_box(proposal, sigma, k)
    bounds = {Side.LEFT: gt.x1, Side.RIGHT: gt.x2, Side.TOP: gt.y1, Side.DOWN: gt.y2}
    sides = {}
    for side in SIDES:
        layout = xl if side.axis is Axis.X else yl
        sides[side] = encode_side(layout, side, bounds[side], use_ignore, use_top2)
    return BoxTargets(sides, xl, yl)


def decode_side(pred: SidePrediction, layout: AxisLayout, side: Side) -> tuple[float, float]:
    """Return ``(boundary, confidence)`` read from the most confident bucket."""
    if pred.confidences.size == 0:
        raise ValueError("empty prediction")
    if pred.confidences.size != layout.k:
        raise ValueError(f"prediction has {pred.confidences.size} buckets, layout has {layout.k}")
    centers = side_centerlines(layout, side)
    j = int(np.argmax(pred.confidences))
    boundary = centers[j] + pred.offsets[j] * layout.bucket_width
    return float(boundary), float(pred.confidences[j])


def decode_box(
    preds: dict[Side, SidePrediction] | Sequence[SidePrediction],
    layouts: tuple[AxisLayout, AxisLayout],
) -> DecodedBox:
    if not isinstance(preds, dict):
        preds = dict(zip(SIDES, preds))
    xl, yl = layouts
    out = {}
    confs = []
    for side in SIDES:
        layout = xl if side.axis is Axis.X else yl
        out[side], c = decode_side(preds[side], layout, side)
        confs.append(c)
    x1, x2 = out[Side.LEFT], out[Side.RIGHT]
    y1, y2 = out[Side.TOP], out[Side.DOWN]
    degenerate = x1 > x2 or y1 > y2
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    return DecodedBox(Box(x1, y1, x2, y2), float(np.mean(confs)), degenerate)


def decode_batch(
    proposals: np.ndarray,
    confidences: np.ndarray,
    offsets: np.ndarray,
    sigma: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``decode_box`` over ``N`` proposals.

    ``confidences`` and ``offsets`` are ``[N, 4, k]`` in side order
    left, right, top, down. Returns ``([N, 4] boxes, [N] loc confidences)``.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    n, _, k = confidences.shape
    w = proposals[:, 2] - proposals[:, 0]
    h = proposals[:, 3] - proposals[:, 1]
    cx = 0.5 * (proposals[:, 0] + proposals[:, 2])
    cy = 0.5 * (proposals[:, 1] + proposals[:, 3])
    lx = sigma * w / (2 * k)
    ly = sigma * h / (2 * k)
    rx = cx - 0.5 * w * sigma
    ry = cy - 0.5 * h * sigma
    lo = np.stack([rx, rx, ry, ry], axis=1)
    bw = np.stack([lx, lx, ly, ly], axis=1)
    start = np.array([0, k, 0, k])

    j = np.argmax(confidences, axis=2)
    rows = np.arange(n)[:, None]
    cols = np.arange(4)[None, :]
    best_conf = confidences[rows, cols, j]
    best_off = offsets[rows, cols, j]
    # same expression as side_centerlines so both paths agree bitwise
    centers = lo + (start[None, :] + j + 0.5) * bw
    bounds = centers + best_off * bw
    x1 = np.minimum(bounds[:, 0], bounds[:, 1])
    x2 = np.maximum(bounds[:, 0], bounds[:, 1])
    y1 = np.minimum(bounds[:, 2], bounds[:, 3])
    y2 = np.maximum(bounds[:, 2], bounds[:, 3])
    return np.stack([x1, y1, x2, y2], axis=1), best_conf.mean(axis=1)


def make_anchor(cx: float, cy: float, stride: float, gamma: float) -> Box:
    """Square anchor of side ``gamma * stride`` centred on ``(cx, cy)``."""
    if stride <= 0 or gamma <= 0:
        raise ValueError("stride and gamma must be positive")
    half = 0.5 * gamma * stride
    return Box(cx - half, cy - half, cx + half, cy + half)


def anchor_grid(image_w: float, image_h: float, stride: float, gamma: float) -> list[Box]:
    """One anchor per feature-map cell, centred on the cell."""
    nx = int(image_w // stride)
    ny = int(image_h // stride)
    return [
        make_anchor((i + 0.5) * stride, (j + 0.5) * stride, stride, gamma)
        for j in range(ny)
        for i in range(nx)
    ]


BACKGROUND = -1
IGNORED = -2


def assign_proposals(
    proposals: Sequence[Box] | np.ndarray,
    gts: Sequence[Box] | np.ndarray,
    pos_iou: float = 0.5,
    neg_iou: float = 0.5,
) -> list[int]:
    """Match each proposal to a gt index, ``BACKGROUND`` or ``IGNORED``."""
    if not 0 <= neg_iou <= pos_iou <= 1:
        raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
    p = _as_array(proposals)
    g = _as_array(gts)
    if len(g) == 0:
        return [BACKGROUND] * len(p)
    ious = iou_matrix(p, g)
    best = np.argmax(ious, axis=1)
    out = []
    for i, j in enumerate(best):
        v = ious[i, j]
        if v >= pos_iou:
            out.append(int(j))
        elif v < neg_iou:
            out.append(BACKGROUND)
        else:
            out.append(IGNORED)
    return out


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    return np.array([b.to_list() for b in boxes], dtype=np.float64).reshape(-1, 4)
