"""Axis-aligned box primitives.

Boxes use continuous coordinates: ``(x1, y1)`` is the top-left corner and
``(x2, y2)`` the bottom-right one, so ``width = x2 - x1`` with no ``+1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"unordered box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def is_degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def scaled(self, c: float) -> "Box":
        return Box(self.x1 * c, self.y1 * c, self.x2 * c, self.y2 * c)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @classmethod
    def parse(cls, text: str) -> "Box":
        """Parse the ``x1,y1,x2,y2`` command-line syntax."""
        return cls.from_seq([float(t) for t in text.split(",")])


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    class_id: int = 1
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of [0, 1]: {self.score}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; zero-area boxes score 0."""
    if a.is_degenerate() or b.is_degenerate():
        return 0.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` arrays -> ``[N, M]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (inter > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid)
    return out


def scale_about_center(b: Box, sigma: float) -> Box:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cx, cy = b.center
    hw = 0.5 * b.width * sigma
    hh = 0.5 * b.height * sigma
    return Box(cx - hw, cy - hh, cx + hw, cy + hh)


def clip_to_image(b: Box, w: float, h: float) -> Box:
    if w <= 0 or h <= 0:
        raise ValueError("image size must be positive")
    x1 = min(max(b.x1, 0.0), w)
    y1 = min(max(b.y1, 0.0), h)
    x2 = min(max(b.x2, 0.0), w)
    y2 = min(max(b.y2, 0.0), h)
    return Box(x1, y1, x2, y2)
