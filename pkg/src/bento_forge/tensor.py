"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation records a node holding its parents and a
closure mapping the output gradient to one gradient per parent. Nodes get a
monotonically increasing sequence number at creation, so sorting the nodes
reachable from a loss by that number yields a topological order for free;
``backward`` walks it in reverse.

Broadcasting is deliberately narrow: the result shape of a binary op must
equal the shape of one of its operands (scalar-vs-tensor, per-channel
``(N, C, 1, 1)`` and per-pixel ``(N, 1, H, W)`` gates all qualify). Anything
that would grow both operands is rejected.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
DEBUG = bool(os.environ.get("BENTO_FORGE_DEBUG"))

_sequence = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, missing gradients...)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that may take part in a recorded graph."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_sequence)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ---------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _scalar_error(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording a graph node when any parent needs grad."""
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        parents_finite = all(np.all(np.isfinite(p.data)) for p in parents)
        if parents_finite:
            raise FloatingPointError("non-finite values produced from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Graph:
    """The recorded operations reachable from a root, in creation order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate: both across fan-out inside one graph and across
    repeated calls (callers clear them, usually through the optimizer).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph if graph is not None else Graph.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# broadcasting helpers


def _result_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} do not broadcast") from None
    if out != a and out != b:
        raise ShapeError(f"unsupported broadcast between {a} and {b}: result {out} grows both operands")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return record(out, (a, b), bw)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha)
    return record(x.data * slope, (x,), lambda g: (g * slope,))


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return record(np.abs(x.data), (x,), lambda g: (g * sign,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping was active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(axis)
    if not axis:
        return tuple(range(ndim))
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is out of range for a {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    return record(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(np.array(x.data[index]), (x,), bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-d table; ``ids`` may be any integer array shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows, width = table.shape

    def bw(g):
        flat = g.reshape(-1, width)
        out = np.zeros((rows, width), dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), flat)
        return (out,)

    return record(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (M x K) @ (K x N), got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"non-integral conv output: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is ``C x H x W`` or ``N x C x H x W``; ``weight`` is
    ``C_out x C_in x kH x kW``; ``bias`` is ``C_out``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or weight.ndim != 4 or xd.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} incompatible with kernel {weight.shape}")
    n, c, h, w = xd.shape
    o, _, kh, kw = weight.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    p, s = padding, stride
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    wd = weight.data
    out = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias {bias.shape} does not match {o} output channels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    if unbatched:
        out = out[0]

    def bw(g):
        g4 = g[None] if unbatched else g
        gw = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g4, wd, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return record(np.ascontiguousarray(out), parents, bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    x = as_tensor(x)
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def bw(g):
        return (g.reshape(lead + (h, f, w, f)).sum(axis=(-3, -1)),)

    return record(out, (x,), bw)


def avg_pool(x, factor: int = 2) -> Tensor:
    """Non-overlapping box-filter downsampling of the last two axes."""
    x = as_tensor(x)
    f = int(factor)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    if h % f or w % f:
        raise ShapeError(f"avg_pool factor {f} does not divide {h}x{w}")
    out = x.data.reshape(lead + (h // f, f, w // f, f)).mean(axis=(-3, -1))

    def bw(g):
        g = g[..., :, None, :, None] / (f * f)
        return (np.broadcast_to(g, lead + (h // f, f, w // f, f)).reshape(x.shape),)

    return record(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    prob = np.exp(out)

    def bw(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
