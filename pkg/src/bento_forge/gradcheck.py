"""Central finite-difference gradient checking and the registry of checked ops."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

LossFn = Callable[..., Tensor]


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    points_checked: int
    analytic: list[np.ndarray] = field(repr=False, default_factory=list)
    numeric: list[np.ndarray] = field(repr=False, default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(projection)).sum()


def finite_diff_check(
    fn: LossFn,
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    points: int | None = 10,
    seed: int = 0,
    name: str = "op",
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` receives one Tensor per input array. A non-scalar output is
    reduced with a fixed random projection. ``points`` bounds how many
    coordinates of each input are probed (None probes all of them).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    projection = None if out.size == 1 else rng.standard_normal(out.shape)
    loss = _scalarize(out, projection)
    backward(loss)

    def evaluate() -> float:
        res = fn(*[Tensor(a) for a in arrays])
        return float(_scalarize(res, projection).data)

    worst = 0.0
    checked = 0
    analytic_all, numeric_all = [], []
    for arr, t in zip(arrays, tensors):
        analytic = np.zeros_like(arr) if t.grad is None else np.broadcast_to(t.grad, arr.shape)
        flat = arr.reshape(-1)
        if points is None or flat.size <= points:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=points, replace=False)
        a_vals = analytic.reshape(-1)[coords]
        n_vals = np.empty(len(coords))
        for k, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            up = evaluate()
            flat[idx] = orig - h
            down = evaluate()
            flat[idx] = orig
            n_vals[k] = (up - down) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(a_vals), np.abs(n_vals)), floor)
        if len(coords):
            worst = max(worst, float(np.max(np.abs(a_vals - n_vals) / denom)))
        checked += len(coords)
        analytic_all.append(a_vals)
        numeric_all.append(n_vals)
    return GradCheckReport(
        name=name,
        max_rel_error=worst,
        tolerance=tolerance,
        points_checked=checked,
        analytic=analytic_all,
        numeric=numeric_all,
        seconds=time.perf_counter() - start,
    )


def tensor_gradcheck(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    points: int | None = 10,
    seed: int = 0,
    name: str = "module",
    floor: float = 1e-6,
) -> GradCheckReport:
    """Like :func:`finite_diff_check` but probes existing tensors in place.

    Used for layer parameters: ``loss_fn`` closes over the tensors, which
    are perturbed through their ``data`` arrays and restored afterwards.
    """
    originals = [t.data.copy() for t in tensors]
    saved_grads = [t.grad for t in tensors]
    for t in tensors:
        t.grad = None
    rng = np.random.default_rng(seed)
    out = loss_fn()
    projection = None if out.size == 1 else rng.standard_normal(out.shape)
    backward(_scalarize(out, projection))
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in tensors]

    def evaluate() -> float:
        return float(_scalarize(loss_fn(), projection).data)

    start = time.perf_counter()
    worst, checked = 0.0, 0
    a_all, n_all = [], []
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if points is None or flat.size <= points:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=points, replace=False)
        n_vals = np.empty(len(coords))
        for k, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            up = evaluate()
            flat[idx] = orig - h
            down = evaluate()
            flat[idx] = orig
            n_vals[k] = (up - down) / (2.0 * h)
        a_vals = grad.reshape(-1)[coords]
        denom = np.maximum(np.maximum(np.abs(a_vals), np.abs(n_vals)), floor)
        if len(coords):
            worst = max(worst, float(np.max(np.abs(a_vals - n_vals) / denom)))
        checked += len(coords)
        a_all.append(a_vals)
        n_all.append(n_vals)
    for t, g, orig in zip(tensors, saved_grads, originals):
        t.grad = g
        np.copyto(t.data, orig)
    return GradCheckReport(name, worst, tolerance, checked, a_all, n_all, time.perf_counter() - start)


@dataclass
class GradCase:
    """A named check; ``runner(seed)`` builds inputs and returns a report."""

    module: str
    name: str
    runner: Callable[[int], GradCheckReport]

    def run(self, seed: int = 0) -> GradCheckReport:
        report = self.runner(seed)
        report.name = f"{self.module}.{self.name}"
        return report


REGISTRY: list[GradCase] = []


def register(module: str, name: str):
    """Decorator adding ``runner(seed) -> GradCheckReport`` to the registry."""

    def wrap(runner):
        REGISTRY.append(GradCase(module, name, runner))
        return runner

    return wrap


def run_registered(module: str = "all", seed: int = 0, cases: Sequence[GradCase] | None = None) -> list[GradCheckReport]:
    from . import checks  # noqa: F401  (populates REGISTRY)

    pool = REGISTRY if cases is None else list(cases)
    return [c.run(seed) for c in pool if module in ("all", c.module)]


def registered_modules() -> list[str]:
    from . import checks  # noqa: F401

    return sorted({c.module for c in REGISTRY})
