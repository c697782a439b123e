"""Spatial transformer: affine grid generation and bilinear sampling.

Coordinates are normalized to [-1, 1] with pixel centres at
``(2j + 1) / W - 1`` (the align-corners-false convention), so the outer
edges of the image sit at exactly -1 and +1. Samples falling outside the
image read zeros.

``theta`` maps *output* coordinates to *input* coordinates:
``(x_in, y_in) = theta @ (x_out, y_out, 1)``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .boxes import LayoutBox
from .tensor import ShapeError, Tensor, record

IDENTITY_THETA = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def pixel_centers(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def _base_grid(out_h: int, out_w: int) -> np.ndarray:
    xs, ys = pixel_centers(out_w), pixel_centers(out_h)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.ones(out_h * out_w)], axis=1)  # P x 3


def affine_grid(theta, out_h: int, out_w: int) -> Tensor:
    """Sampling grid ``[..., H, W, 2]`` for ``theta`` of shape ``[..., 2, 3]``."""
    theta = T.as_tensor(theta)
    if theta.shape[-2:] != (2, 3):
        raise ShapeError(f"theta must end in 2 x 3, got {theta.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"grid size must be positive, got {out_h}x{out_w}")
    lead = theta.shape[:-2]
    base = _base_grid(out_h, out_w)
    th = theta.data.reshape(-1, 2, 3)
    grid = np.einsum("pk,nck->npc", base, th)

    def bw(g):
        g = g.reshape(th.shape[0], -1, 2)
        return (np.einsum("npc,pk->nck", g, base).reshape(theta.shape),)

    return record(grid.reshape(lead + (out_h, out_w, 2)), (theta,), bw)


# coordinates this close to a pixel centre are treated as on it, so integer
# translations reproduce pixels exactly instead of to ~1e-14
SNAP = 1e-9


def _snap(coord: np.ndarray) -> np.ndarray:
    nearest = np.rint(coord)
    return np.where(np.abs(coord - nearest) < SNAP, nearest, coord)


def bilinear_corners(grid: np.ndarray, h: int, w: int):
    """Corner indices and weights for sampling an ``h x w`` image.

    Returns a list of four ``(ys, xs, weight, valid)`` tuples where
    ``weight`` already includes the zero-padding mask.
    """
    ix = _snap(((grid[..., 0] + 1.0) * w - 1.0) / 2.0)
    iy = _snap(((grid[..., 1] + 1.0) * h - 1.0) / 2.0)
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    fx = ix - x0
    fy = iy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            ys, xs = y0 + dy, x0 + dx
            valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
            out.append((ys, xs, wx * wy * valid, valid))
    return out


def bilinear_sample(image, grid) -> Tensor:
    """Sample ``image`` (``C x H x W`` or ``N x C x H x W``) at ``grid``.

    ``grid`` is ``H' x W' x 2`` (or batched ``N x H' x W' x 2``); the result
    is differentiable with respect to both arguments.
    """
    image, grid = T.as_tensor(image), T.as_tensor(grid)
    unbatched = image.ndim == 3
    img = image.data[None] if unbatched else image.data
    gr = grid.data[None] if grid.ndim == 3 else grid.data
    if img.ndim != 4 or gr.ndim != 4 or gr.shape[-1] != 2 or gr.shape[0] != img.shape[0]:
        raise ShapeError(f"bilinear_sample: image {image.shape} incompatible with grid {grid.shape}")
    n, c, h, w = img.shape
    _, ho, wo, _ = gr.shape
    p = ho * wo
    flat = img.reshape(n, c, h * w)
    gflat = gr.reshape(n, p, 2)
    ix = _snap(((gflat[..., 0] + 1.0) * w - 1.0) / 2.0)
    iy = _snap(((gflat[..., 1] + 1.0) * h - 1.0) / 2.0)
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    fx, fy = ix - x0, iy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    corners = []
    out = np.zeros((n, c, p))
    for dy in (0, 1):
        for dx in (0, 1):
            xs, ys = x0 + dx, y0 + dy
            valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
            idx = np.where(valid, np.clip(ys, 0, h - 1) * w + np.clip(xs, 0, w - 1), 0)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            weight = wx * wy * valid
            vals = np.take_along_axis(flat, idx[:, None, :], axis=2) * valid[:, None, :]
            out += weight[:, None, :] * vals
            corners.append((dx, dy, idx, valid, wx, wy, weight, vals))

    def bw(g):
        g = g.reshape(n, c, p)
        gimg = np.zeros(n * c * h * w)
        gix = np.zeros((n, p))
        giy = np.zeros((n, p))
        offsets = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        for dx, dy, idx, valid, wx, wy, weight, vals in corners:
            contrib = weight[:, None, :] * g
            gimg += np.bincount((offsets + idx[:, None, :]).ravel(), weights=contrib.ravel(), minlength=gimg.size)
            gv = (g * vals).sum(axis=1)
            gix += gv * (1.0 if dx else -1.0) * wy * valid
            giy += gv * (1.0 if dy else -1.0) * wx * valid
        ggrid = np.stack([gix * (w / 2.0), giy * (h / 2.0)], axis=-1).reshape(grid.shape)
        gimg = gimg.reshape(img.shape)
        return (gimg[0] if unbatched else gimg, ggrid)

    result = out.reshape(n, c, ho, wo)
    return record(result[0] if unbatched else result, (image, grid), bw)


def stn_loss(predicted, target) -> Tensor:
    """Mean absolute difference between a transformed item and its target."""
    predicted, target = T.as_tensor(predicted), T.as_tensor(target)
    if predicted.shape != target.shape:
        raise ShapeError(f"stn_loss shapes differ: {predicted.shape} vs {target.shape}")
    return T.absolute(predicted - target).mean()


def bbox_to_affine(box: LayoutBox) -> np.ndarray:
    """Theta that maps the full item canvas into ``box`` (scale + translation)."""
    box.validate()
    return np.array(
        [
            [1.0 / box.w, 0.0, (1.0 - 2.0 * box.cx) / box.w],
            [0.0, 1.0 / box.h, (1.0 - 2.0 * box.cy) / box.h],
        ]
    )


def boxes_to_theta(boxes) -> Tensor:
    """Differentiable batch form of :func:`bbox_to_affine`: ``[..., 4] -> [..., 2, 3]``."""
    boxes = T.as_tensor(boxes)
    b = boxes.data
    if b.shape[-1] != 4:
        raise ShapeError(f"boxes must end in 4 (cx, cy, w, h), got {b.shape}")
    if np.any(b[..., 2:] <= 0):
        raise ShapeError("degenerate box: non-positive width or height")
    cx, cy, w, h = (b[..., i] for i in range(4))
    theta = np.zeros(b.shape[:-1] + (2, 3))
    theta[..., 0, 0] = 1.0 / w
    theta[..., 0, 2] = (1.0 - 2.0 * cx) / w
    theta[..., 1, 1] = 1.0 / h
    theta[..., 1, 2] = (1.0 - 2.0 * cy) / h

    def bw(g):
        gb = np.zeros(b.shape)
        gb[..., 0] = g[..., 0, 2] * (-2.0 / w)
        gb[..., 1] = g[..., 1, 2] * (-2.0 / h)
        gb[..., 2] = -(g[..., 0, 0] + g[..., 0, 2] * (1.0 - 2.0 * cx)) / (w * w)
        gb[..., 3] = -(g[..., 1, 1] + g[..., 1, 2] * (1.0 - 2.0 * cy)) / (h * h)
        return (gb,)

    return record(theta, (boxes,), bw)


def warp(image, theta, out_h: int | None = None, out_w: int | None = None) -> Tensor:
    """Grid generation followed by bilinear sampling."""
    image = T.as_tensor(image)
    h, w = image.shape[-2:]
    return bilinear_sample(image, affine_grid(theta, out_h or h, out_w or w))
