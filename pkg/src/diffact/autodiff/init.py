"""Deterministic parameter initialization keyed on (seed, tensor name)."""
from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, default_dtype

INIT_STD = 0.02


def tensor_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def truncated_normal(shape, seed: int, name: str, std: float = INIT_STD, dtype=None) -> Tensor:
    """Normal(0, std) resampled until every value lies within two std."""
    rng = tensor_rng(seed, name)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return Tensor(out.astype(dtype or default_dtype()), requires_grad=True, name=name)


def zeros(shape, name: str, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad=True, name=name)


def ones(shape, name: str, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or default_dtype()), requires_grad=True, name=name)
