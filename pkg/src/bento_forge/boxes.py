"""Normalized axis-aligned layout boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutBox:
    """Box in normalized canvas coordinates: centre (cx, cy), size (w, h).

    The canvas spans [0, 1] on both axes with (0, 0) at the top-left.
    """

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "LayoutBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def validate(self) -> "LayoutBox":
        vals = self.as_tuple()
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateBoxError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBoxError(f"box has non-positive size: {vals}")
        if self.w > 1 or self.h > 1 or not (0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise DegenerateBoxError(f"box outside the unit canvas: {vals}")
        return self


def iou(a: LayoutBox, b: LayoutBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # areas from the same corners as the intersection, so a box scores exactly 1 against itself
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0
