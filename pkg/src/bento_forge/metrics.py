"""Evaluation helpers for generated layouts."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .boxes import LayoutBox, iou


def mean_iou(pred: Sequence[Sequence[LayoutBox]], truth: Sequence[Sequence[LayoutBox]]) -> float:
    """Mean per-item IoU over scenes; items matched by position."""
    vals = []
    for p, t in zip(pred, truth, strict=True):
        if len(p) != len(t):
            raise ValueError(f"scene has {len(t)} ground-truth boxes but {len(p)} predictions")
        vals.extend(iou(a, b) for a, b in zip(p, t))
    if not vals:
        raise ValueError("mean_iou needs at least one box")
    return float(np.mean(vals))


def random_box_baseline(truth: Sequence[Sequence[LayoutBox]], samples: int = 200, seed: int = 0) -> float:
    """Expected IoU of boxes with cx, cy, w, h drawn uniformly from (0, 1]."""
    rng = np.random.default_rng(seed)
    vals = []
    for boxes in truth:
        for b in boxes:
            for _ in range(samples):
                cx, cy = rng.random(2)
                w, h = 1.0 - rng.random(2)
                vals.append(iou(LayoutBox(cx, cy, w, h), b))
    return float(np.mean(vals))


def pairwise_layout_distance(a: Sequence[LayoutBox], b: Sequence[LayoutBox]) -> float:
    """Largest Euclidean ``(cx, cy, w, h)`` distance between corresponding boxes."""
    diff = np.array([x.as_tuple() for x in a]) - np.array([y.as_tuple() for y in b])
    return float(np.linalg.norm(diff, axis=1).max())


def distinct_layouts(layouts: Sequence[Sequence[LayoutBox]], threshold: float = 0.05) -> int:
    """Size of a greedy set of layouts pairwise farther apart than ``threshold``."""
    kept: list[Sequence[LayoutBox]] = []
    for lay in layouts:
        if all(pairwise_layout_distance(lay, k) > threshold for k in kept):
            kept.append(lay)
    return len(kept)
