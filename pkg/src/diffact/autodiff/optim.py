"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, TrainingError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Update ``params`` in place and return the advanced ``state``.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Adam over a name -> Tensor mapping; reads gradients from ``Tensor.grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step({n: p.data for n, p in self.params.items()}, grads, self.state,
                  self.lr, self.betas, self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.state.m:
            out[f"adam.m/{n}"] = self.state.m[n]
            out[f"adam.v/{n}"] = self.state.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.state = AdamState(step=step)
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                self.state.m[name] = arr.copy()
            elif kind == "adam.v":
                self.state.v[name] = arr.copy()
