"""Minimal reverse-mode autodiff on top of numpy arrays."""
from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .init import truncated_normal
from .ops import (concat, embedding, gelu, getitem, layer_norm, linear, matmul, mean, mse,
                  mul, reshape, softmax, sub, swapaxes, transpose)
from .ops import add
from .ops import sum as tsum
from .optim import Adam, AdamState, adam_step
from .tensor import (Graph, Tensor, backward, default_dtype, no_grad, precision,
                     set_default_dtype)

__all__ = [
    "Adam", "AdamState", "Graph", "Tensor", "adam_step", "add", "backward", "concat",
    "default_dtype", "embedding", "gelu", "getitem", "layer_norm", "linear", "load_checkpoint",
    "matmul", "mean", "mse", "mul", "no_grad", "ops", "precision", "reshape", "save_checkpoint",
    "set_default_dtype", "softmax", "sub", "swapaxes", "transpose", "truncated_normal", "tsum",
]
