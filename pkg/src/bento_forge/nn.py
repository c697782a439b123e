"""Layers shared by both generative pipelines.

Weights are drawn from N(0, 0.02) and biases start at zero. Every layer
takes an explicit ``numpy.random.Generator`` so model construction is
seed-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Parameter container; attribute names become checkpoint keys."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        problems = []
        for name, p in own.items():
            if name not in arrays:
                if strict:
                    problems.append(f"missing {name}")
                continue
            src = np.asarray(arrays[name])
            if src.shape != p.shape:
                problems.append(f"{name}: checkpoint {src.shape} vs model {p.shape}")
        if problems:
            raise ShapeError("incompatible parameters: " + "; ".join(problems))
        for name, p in own.items():
            if name in arrays:
                writeable = p.data.flags.writeable
                p.data = np.array(arrays[name], dtype=np.float64)
                p.data.flags.writeable = writeable

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.data.flags.writeable = not frozen
            p.requires_grad = not frozen
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = INIT_STD):
        self.weight = Parameter(_normal(rng, (n_in, n_out), std))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects (B x {self.weight.shape[0]}), got {x.shape}")
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        std: float = INIT_STD,
    ):
        self.weight = Parameter(_normal(rng, (c_out, c_in, kernel, kernel), std))
        self.bias = Parameter(np.zeros(c_out))
        self._stride = stride
        self._padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or N x C x H x W, got {x.shape}")
    return x, False


class ChannelAttention(Module):
    """Squeeze-excitation gate: pool, two-layer MLP (reduction 4), sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self._channels = channels

    def gate(self, x: Tensor) -> Tensor:
        xb, _ = _batched(x)
        if xb.shape[1] != self._channels:
            raise ShapeError(f"channel attention built for {self._channels} channels, got {xb.shape}")
        pooled = xb.mean(axis=(2, 3))
        return T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        xb, squeeze = _batched(x)
        g = self.gate(xb)
        out = xb * g.reshape(g.shape + (1, 1))
        return out.reshape(x.shape) if squeeze else out


class SpatialAttention(Module):
    """Per-pixel gate from a 1x1 convolution followed by a sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, 1, 1, rng)

    def gate(self, x: Tensor) -> Tensor:
        xb, _ = _batched(x)
        return T.sigmoid(self.conv(xb))

    def forward(self, x: Tensor) -> Tensor:
        xb, squeeze = _batched(x)
        out = xb * self.gate(xb)
        return out.reshape(x.shape) if squeeze else out


@dataclass
class TextEmbedding:
    vector: Tensor
    source_caption: tuple[int, ...]


class TextEmbedder(Module):
    """Learned token table with mean pooling.

    Stands in for a pretrained sentence encoder behind the same call
    signature; ids outside the table map to ``unk_id``.
    """

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, unk_id: int = 1, std: float = 1.0):
        self.table = Parameter(_normal(rng, (vocab_size, dim), std))
        self._unk = unk_id

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def _clean(self, ids: Sequence[int]) -> list[int]:
        vocab = self.table.shape[0]
        return [i if 0 <= i < vocab else self._unk for i in ids]

    def embed(self, tokens: Sequence[int]) -> TextEmbedding:
        ids = self._clean(tokens)
        if not ids:
            return TextEmbedding(Tensor(np.zeros(self.dim)), ())
        return TextEmbedding(T.take_rows(self.table, ids).mean(axis=0), tuple(ids))

    def embed_batch(self, captions: Sequence[Sequence[int]]) -> Tensor:
        """Mean-pooled embeddings for a batch, shape ``B x dim``."""
        cleaned = [self._clean(c) for c in captions]
        width = max(1, max(len(c) for c in cleaned))
        ids = np.zeros((len(cleaned), width), dtype=np.int64)
        weights = np.zeros((len(cleaned), width, 1))
        for b, c in enumerate(cleaned):
            ids[b, : len(c)] = c
            if c:
                weights[b, : len(c), 0] = 1.0 / len(c)
        rows = T.take_rows(self.table, ids)
        return (rows * Tensor(weights)).sum(axis=1)


class ImageEncoder(Module):
    """Three stride-2 conv blocks, flatten, linear projection to ``d_img``."""

    def __init__(
        self,
        resolution: int,
        d_img: int,
        rng: np.random.Generator,
        channels=(8, 16, 32),
        in_channels: int = 3,
        std: float = INIT_STD,
    ):
        if resolution % 8:
            raise ShapeError(f"image encoder resolution must be a multiple of 8, got {resolution}")
        self.blocks = []
        c_prev = in_channels
        for c in channels:
            self.blocks.append(Conv2d(c_prev, c, 4, rng, stride=2, padding=1, std=std))
            c_prev = c
        self._res = resolution
        self._in = in_channels
        side = resolution // 8
        self.proj = Linear(c_prev * side * side, d_img, rng, std=std)

    def forward(self, image: Tensor) -> Tensor:
        xb, squeeze = _batched(image)
        if xb.shape[1:] != (self._in, self._res, self._res):
            raise ShapeError(f"image encoder expects {self._in}x{self._res}x{self._res}, got {image.shape}")
        h = xb
        for block in self.blocks:
            h = T.leaky_relu(block(h), 0.2)
        feat = self.proj(h.reshape(h.shape[0], -1))
        return feat.reshape(feat.shape[1:]) if squeeze else feat
