"""Finite-difference gradient checks for every primitive and the DiT forward pass."""
from __future__ import annotations

import numpy as np

from diffact import action_model as am
from diffact.autodiff import Tensor, backward, ops, precision, no_grad

from oracles import central_difference, relative_error

PROBES = 20
TOL = 1e-4
EPS = 1e-6
# the full model sums many more terms; round-off favours a larger central step (h ~ cbrt(eps_mach))
DIT_EPS = 1e-5


def _r(rng, *shape):
    return rng.standard_normal(shape)


# name -> (input factory, function of input tensors)
PRIMITIVES = {
    "add": (lambda g: [_r(g, 3, 4), _r(g, 4)], lambda a, b: ops.add(a, b)),
    "sub": (lambda g: [_r(g, 2, 3, 4), _r(g, 3, 1)], lambda a, b: ops.sub(a, b)),
    "mul": (lambda g: [_r(g, 3, 4), _r(g, 3, 4)], lambda a, b: ops.mul(a, b)),
    "matmul": (lambda g: [_r(g, 4, 3), _r(g, 3, 2)], lambda a, b: ops.matmul(a, b)),
    "matmul_batched": (lambda g: [_r(g, 2, 2, 3, 4), _r(g, 2, 2, 4, 3)], lambda a, b: ops.matmul(a, b)),
    "matmul_shared": (lambda g: [_r(g, 2, 3, 4), _r(g, 4, 5)], lambda a, b: ops.matmul(a, b)),
    "linear": (lambda g: [_r(g, 2, 3, 4), _r(g, 4, 5), _r(g, 5)], lambda x, w, b: ops.linear(x, w, b)),
    "gelu": (lambda g: [2 * _r(g, 3, 5)], lambda x: ops.gelu(x)),
    "layer_norm": (lambda g: [_r(g, 3, 6), _r(g, 6), _r(g, 6)], lambda x, w, b: ops.layer_norm(x, w, b)),
    "layer_norm_plain": (lambda g: [_r(g, 2, 2, 5)], lambda x: ops.layer_norm(x)),
    "softmax": (lambda g: [_r(g, 3, 5)], lambda x: ops.softmax(x)),
    "transpose": (lambda g: [_r(g, 2, 3, 4)], lambda x: ops.transpose(x, (2, 0, 1))),
    "reshape": (lambda g: [_r(g, 2, 6)], lambda x: ops.reshape(x, (3, 4))),
    "slice": (lambda g: [_r(g, 4, 5)], lambda x: x[1:3, ::2]),
    "gather": (lambda g: [_r(g, 5, 3)], lambda x: x[np.array([0, 2, 2, 4])]),
    "concat": (lambda g: [_r(g, 2, 3), _r(g, 2, 2)], lambda a, b: ops.concat([a, b], axis=1)),
    "embedding": (lambda g: [_r(g, 4, 3)], lambda t: ops.embedding(t, np.array([[1, 3], [1, 0]]))),
    "sum": (lambda g: [_r(g, 3, 4)], lambda x: ops.sum(x, axis=1)),
    "mean": (lambda g: [_r(g, 3, 4)], lambda x: ops.mean(x, axis=0, keepdims=True)),
    "mse": (lambda g: [_r(g, 3, 4), _r(g, 3, 4)], lambda a, b: ops.mse(a, b)),
}


def check_primitive(name: str, seed: int) -> float:
    make, fn = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    with precision("float64"):
        arrays = [a.astype(np.float64) for a in make(rng)]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        proj = rng.standard_normal(out.shape)
        backward(ops.sum(ops.mul(out, proj)))

        def f():
            with no_grad():
                return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

        return max(relative_error(t.grad, central_difference(f, a, EPS)) for t, a in zip(tensors, arrays))


def check_dit_directional(seed: int, params=None, horizon: int = 15, batch: int = 2) -> float:
    """Directional derivative of a random projection of the DiT-Tiny output."""
    rng = np.random.default_rng(seed)
    with precision("float64"):
        if params is None:
            params = am.build(am.preset("dit-tiny", horizon=horizon), seed=1)
        cfg = params.config
        x = rng.standard_normal((batch, cfg.seq_len, cfg.action_dim))
        c = rng.standard_normal((batch, cfg.cond_dim))
        steps = rng.integers(0, 100, size=batch)
        xt, ct = Tensor(x, requires_grad=True), Tensor(c, requires_grad=True)
        for p in params.tensors.values():
            p.grad = None
        out = params(xt, ct, steps)
        proj = rng.standard_normal(out.shape)
        backward(ops.sum(ops.mul(out, proj)))
        leaves = [xt, ct] + list(params.tensors.values())
        dirs = [rng.standard_normal(t.shape) for t in leaves]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        # parameters outside the forward pass (null_cond) have no gradient
        analytic = sum(float((t.grad * d).sum()) for t, d in zip(leaves, dirs) if t.grad is not None)
        base = [t.data.copy() for t in leaves]

        def f(sign):
            for t, b, d in zip(leaves, base, dirs):
                t.data = b + sign * EPS * d
            with no_grad():
                val = float((params(Tensor(leaves[0].data), Tensor(leaves[1].data), steps).data * proj).sum())
            for t, b in zip(leaves, base):
                t.data = b
            return val

        numeric = (f(1.0) - f(-1.0)) / (2 * EPS)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def check_dit_per_tensor(seed: int, params=None, horizon: int = 15, batch: int = 2,
                         eps: float = DIT_EPS) -> dict[str, float]:
    """Per-leaf directional derivative errors, so a small tensor cannot hide behind a large one."""
    rng = np.random.default_rng(seed)
    with precision("float64"):
        if params is None:
            params = am.build(am.preset("dit-tiny", horizon=horizon), seed=1)
        cfg = params.config
        xt = Tensor(rng.standard_normal((batch, cfg.seq_len, cfg.action_dim)), requires_grad=True)
        ct = Tensor(rng.standard_normal((batch, cfg.cond_dim)), requires_grad=True)
        steps = rng.integers(0, 100, size=batch)
        for p in params.tensors.values():
            p.grad = None
        out = params(xt, ct, steps)
        proj = rng.standard_normal(out.shape)
        backward(ops.sum(ops.mul(out, proj)))
        leaves = {"noisy_actions": xt, "cond": ct}
        leaves.update({n: t for n, t in params.tensors.items() if n != "null_cond"})

        def f():
            with no_grad():
                return float((params(Tensor(xt.data), Tensor(ct.data), steps).data * proj).sum())

        errors = {}
        for name, t in leaves.items():
            d = rng.standard_normal(t.shape)
            d /= np.linalg.norm(d)
            analytic = float((t.grad * d).sum())
            base = t.data
            t.data = base + eps * d
            fp = f()
            t.data = base - eps * d
            fm = f()
            t.data = base
            numeric = (fp - fm) / (2 * eps)
            errors[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
    return errors
