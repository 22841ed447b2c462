"""Differentiable primitives.

Broadcasting follows numpy rules for the elementwise ops; gradients are
summed back to each operand's shape. Everything else is kept to what the
transformer and MLP action models need.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_node

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a shared 2-D matrix."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return make_node(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` (fused for speed)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    k, n = weight.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (n,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    t = np.tanh(GELU_C * (xd + GELU_K * xd * xd * xd))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xd * xd)
        return (g * dx,)

    return make_node(out, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map.

    The ``eps`` inside the square root keeps constant rows finite (they map to 0).
    """
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)
    d = xd.shape[-1]

    def bw(g):
        grads = []
        gxh = g * weight.data if weight is not None else g
        if x.requires_grad:
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
            grads.append(gx)
        else:
            grads.append(None)
        if weight is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return grads

    return make_node(out, parents, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {x.ndim}-D tensor")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))

    def bw(g):
        return (np.transpose(g, inverse),)

    return make_node(np.transpose(x.data, axes), (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the backward pass scatters with ``np.add.at``."""
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(out, copy=True), (x,), bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; repeated indices accumulate gradient."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(table.data[idx], (table,), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gd = (2.0 / n) * g * diff
        return (gd if pred.requires_grad else None,
                -gd if target.requires_grad else None)

    return make_node(np.asarray((diff * diff).mean()), (pred, target), bw)
