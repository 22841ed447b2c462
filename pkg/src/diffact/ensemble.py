"""Inference-time fusion of overlapping action-sequence predictions.

All aggregation happens in normalized action space. The first six components
are continuous; the seventh is the gripper, binarized to +/-1 before fusion
and combined by weighted vote.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

CONT = 6
DEFAULT_ALPHA = 0.1
DEFAULT_C = 0.2


class Strategy(str, Enum):
    CHUNK = "chunk"
    TEMPORAL = "temporal"
    ADAPTIVE = "adaptive"
    RAW = "raw"


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy = Strategy.ADAPTIVE
    window: int = 2
    alpha: float = DEFAULT_ALPHA
    temporal_decay: float = 0.1
    chunk_len: int = 2

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be > 0")
        if self.chunk_len < 1:
            raise ConfigurationError("chunk_len must be >= 1")
        if self.window < 0:
            raise ConfigurationError("window K must be >= 0")
        if self.temporal_decay < 0:
            raise ConfigurationError("temporal decay must be >= 0")


def window_size(per_step_action_std: float, C: float = DEFAULT_C) -> int:
    """Ensemble window K such that K * std stays near the constant C."""
    if not per_step_action_std > 0:
        raise ValueError(f"action std must be positive, got {per_step_action_std}")
    return max(1, int(round(C / per_step_action_std)))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def adaptive_weights(candidates: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Normalized ``exp(alpha * cos(current, candidate_k))``; row 0 is the current prediction."""
    cur = candidates[0, :CONT]
    w = np.array([math.exp(alpha * cosine(cur, c[:CONT])) for c in candidates])
    return w / w.sum()


def temporal_weights(n: int, decay: float) -> np.ndarray:
    """Normalized ``exp(-decay * k)`` for ages k = 0 (newest) .. n-1."""
    w = np.exp(-decay * np.arange(n, dtype=np.float64))
    return w / w.sum()


def binarize_gripper(actions: np.ndarray) -> np.ndarray:
    out = np.array(actions, dtype=np.float64, copy=True)
    out[..., CONT] = np.where(out[..., CONT] > 0.0, 1.0, -1.0)
    return out


def fuse(candidates: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of the continuous parts; the gripper closes if the weighted vote reaches 0.5."""
    if len(candidates) == 1:
        return np.array(candidates[0], dtype=np.float64, copy=True)
    out = np.empty(candidates.shape[1], dtype=np.float64)
    out[:CONT] = weights @ candidates[:, :CONT]
    vote = float(weights @ (candidates[:, CONT] > 0.0))
    out[CONT] = 1.0 if vote >= 0.5 else -1.0
    return out


class EnsembleBuffer:
    """Past predicted sequences with their origin steps, newest first on read."""

    def __init__(self, window: int, horizon: int):
        self.window = window
        self.horizon = horizon
        self.entries: deque[tuple[int, np.ndarray]] = deque()

    def add(self, t: int, sequence: np.ndarray) -> None:
        if self.entries and t <= self.entries[-1][0]:
            raise ValueError(f"origin steps must increase: {t} after {self.entries[-1][0]}")
        self.entries.append((t, np.asarray(sequence, dtype=np.float64)))
        self._evict(t)

    def _evict(self, t: int) -> None:
        k_max = min(self.window, self.horizon)
        while self.entries and t - self.entries[0][0] > k_max:
            self.entries.popleft()

    def candidates(self, t: int) -> np.ndarray:
        """Predictions targeting step ``t``, ordered by age k = t - t' ascending."""
        k_max = min(self.window, self.horizon)
        rows = [seq[t - t0] for t0, seq in reversed(self.entries) if 0 <= t - t0 <= k_max]
        return np.array(rows)

    def __len__(self) -> int:
        return len(self.entries)


def aggregate_adaptive(buffer: EnsembleBuffer, current: np.ndarray, t: int,
                       alpha: float = DEFAULT_ALPHA) -> tuple[np.ndarray, np.ndarray]:
    """Fuse ``current`` (a_t|o_t) with the buffer's predictions for step t.

    ``buffer`` holds only historical entries here. Returns ``(action, weights)``.
    """
    hist = buffer.candidates(t)
    cands = np.vstack([current[None, :], hist]) if len(hist) else np.asarray(current)[None, :]
    w = adaptive_weights(cands, alpha)
    return fuse(cands, w), w


def aggregate_temporal(buffer: EnsembleBuffer, current: np.ndarray, t: int,
                       decay: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    hist = buffer.candidates(t)
    cands = np.vstack([current[None, :], hist]) if len(hist) else np.asarray(current)[None, :]
    w = temporal_weights(len(cands), decay)
    return fuse(cands, w), w


class ActionExecutor:
    """Per-episode execution state for one strategy.

    Call :meth:`needs_prediction` before each env step and pass a fresh
    sequence to :meth:`policy_step` only when it returns True.
    """

    def __init__(self, config: StrategyConfig, horizon: int, record: bool = False):
        self.config = config
        self.horizon = horizon
        self.buffer = EnsembleBuffer(config.window, horizon)
        self.chunk_len = min(config.chunk_len, horizon + 1)
        self._chunk: tuple[int, np.ndarray] | None = None
        self.model_calls = 0
        self.trace: list[dict] | None = [] if record else None

    def needs_prediction(self, t: int) -> bool:
        if self.config.strategy is Strategy.CHUNK:
            return self._chunk is None or t - self._chunk[0] >= self.chunk_len
        return True

    def policy_step(self, t: int, new_sequence: np.ndarray | None = None) -> np.ndarray:
        s = self.config.strategy
        seq = None if new_sequence is None else binarize_gripper(new_sequence)
        if seq is not None:
            self.model_calls += 1
        if s is Strategy.CHUNK:
            if seq is not None:
                self._chunk = (t, seq)
            if self._chunk is None:
                raise ValueError("chunking needs a prediction on its first step")
            t0, chunk = self._chunk
            action, weights = chunk[t - t0].copy(), np.ones(1)
        else:
            if seq is None:
                raise ValueError(f"strategy {s.value} needs a new prediction every step")
            if s is Strategy.RAW or self.config.window == 0:
                action, weights = seq[0].copy(), np.ones(1)
            elif s is Strategy.ADAPTIVE:
                action, weights = aggregate_adaptive(self.buffer, seq[0], t, self.config.alpha)
            else:
                action, weights = aggregate_temporal(self.buffer, seq[0], t, self.config.temporal_decay)
            self.buffer.add(t, seq)
        if self.trace is not None:
            self.trace.append({
                "t": int(t), "strategy": s.value, "weights": weights.tolist(),
                "raw_prediction": None if seq is None else seq[0].tolist(),
                "executed_action": action.tolist(),
            })
        return action


def write_trace(path, records) -> None:
    """One JSON object per line: t, strategy, weights, raw_prediction, executed_action."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
