"""Tensor type, graph recording and reverse-mode traversal.

Every op in :mod:`diffact.autodiff.ops` builds its output through
:func:`make_node`, which records the parents and a backward rule when
gradient tracking is on. :func:`backward` walks the recorded graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeError

_state = threading.local()

DTYPES = {"float32": np.float32, "float64": np.float64}


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    """Set the floating dtype used when tensors are built from Python data."""
    _state.dtype = _resolve_dtype(dtype)


def _resolve_dtype(dtype) -> type:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"float32"`` or ``"float64"``)."""
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain constant tensors."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-d array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_resolve_dtype(dtype), copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- array protocol -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implemented in ops) --------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> dict:
        return backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and, if any parent needs gradients, record ``backward_fn``.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent,
    each with that parent's shape.
    """
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Graph:
    """Topologically ordered view of the nodes that produced ``output``."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; recursion depth would limit deep models
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate dLoss/dLeaf into ``leaf.grad`` for every tracked leaf.

    Returns a mapping from each leaf tensor to its gradient for this call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
