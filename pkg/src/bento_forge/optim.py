"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GraphError, Tensor


class FrozenParameterError(RuntimeError):
    """An update was attempted on a parameter that has been frozen."""


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam over an ordered list of parameters.

    ``step`` raises if any parameter has no gradient, then clears all
    gradients so the next backward starts from zero.
    """

    def __init__(self, params, lr: float = 2e-4, betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.state = AdamState(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GraphError(f"parameter {p.name or i} has no gradient; run backward first")
            if not p.data.flags.writeable:
                raise FrozenParameterError(f"parameter {p.name or i} is frozen")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.grad = None

    # checkpoint support: moments are exposed as named arrays
    def state_arrays(self, names: list[str]) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(names, self.state.m, self.state.v):
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
        return out

    def load_state_arrays(self, names: list[str], arrays: dict[str, np.ndarray], step: int) -> None:
        for i, name in enumerate(names):
            self.state.m[i] = np.array(arrays[f"{name}.m"], dtype=np.float64).reshape(self.params[i].shape)
            self.state.v[i] = np.array(arrays[f"{name}.v"], dtype=np.float64).reshape(self.params[i].shape)
        self.state.step = int(step)
