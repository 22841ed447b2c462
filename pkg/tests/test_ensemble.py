import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffact.ensemble import (ActionExecutor, EnsembleBuffer, Strategy, StrategyConfig, adaptive_weights,
                              aggregate_adaptive, aggregate_temporal, cosine, fuse, temporal_weights,
                              window_size, write_trace)
from diffact.errors import ConfigurationError

from oracles import adaptive_reference, temporal_reference


def buffer_with(history, t):
    """Buffer whose entry of age k predicts ``history[k-1]`` for step ``t``."""
    k_max = len(history)
    buf = EnsembleBuffer(window=k_max, horizon=k_max)
    for k in range(k_max, 0, -1):
        seq = np.zeros((k_max + 1, 7))
        seq[k] = history[k - 1]
        buf.add(t - k, seq)
    return buf


def random_action(rng):
    a = rng.standard_normal(7)
    a[6] = rng.choice([-1.0, 1.0])
    return a


def test_window_rule():
    assert window_size(0.1, 0.2) == 2
    assert window_size(0.2 / 7, 0.2) == 7
    assert window_size(10.0, 0.2) == 1
    with pytest.raises(ValueError):
        window_size(0.0)


def test_empty_buffer_returns_current():
    cur = np.array([0.1, -0.2, 0.3, 0.0, 0.5, -0.6, 1.0])
    for agg in (aggregate_adaptive, aggregate_temporal):
        out, w = agg(EnsembleBuffer(2, 5), cur, 10)
        np.testing.assert_array_equal(out, cur)
        np.testing.assert_array_equal(w, [1.0])


def test_zero_norm_cosine():
    assert cosine(np.zeros(6), np.ones(6)) == 0.0


def test_identical_predictions_uniform():
    a = np.array([0.3, 0.1, -0.4, 0.2, 0.0, 0.9, 1.0])
    out, w = aggregate_adaptive(buffer_with([a, a], 5), a, 5)
    np.testing.assert_allclose(w, [1 / 3] * 3)
    np.testing.assert_allclose(out, a)


def test_orthogonal_history_weights():
    cur = np.array([1.0, 0, 0, 0, 0, 0, 1.0])
    old = np.array([0, 1.0, 0, 0, 0, 0, 1.0])
    w = adaptive_weights(np.stack([cur, old]), alpha=0.1)
    raw = w / w[1]
    assert raw[0] == pytest.approx(1.10517, abs=1e-5)
    assert raw[1] == pytest.approx(1.0)


def test_hand_built_k2():
    cur = [0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0]
    hist = [[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, -1.0], [-0.5, 0.0, 0.0, 0.0, 0.0, 0.5, -1.0]]
    out, w = aggregate_adaptive(buffer_with([np.array(h) for h in hist], 3), np.array(cur), 3, alpha=0.1)
    ref, rw = adaptive_reference(cur, hist, 0.1)
    assert np.max(np.abs(out - ref)) <= 1e-12
    # cos = 1, 1/2, -1/2
    e = [math.exp(0.1), math.exp(0.05), math.exp(-0.05)]
    np.testing.assert_allclose(w, [x / sum(e) for x in e], rtol=1e-12)
    assert out[6] == -1.0  # current alone carries < 0.5 of the vote


def test_temporal_limits():
    a, b, c = (np.full(7, v) for v in (0.3, -0.6, 0.9))
    for x in (a, b, c):
        x[6] = 1.0
    out, w = aggregate_temporal(buffer_with([b, c], 4), a, 4, decay=0.0)
    np.testing.assert_allclose(w, [1 / 3] * 3)
    np.testing.assert_allclose(out[:6], (a[:6] + b[:6] + c[:6]) / 3)
    out, _ = aggregate_temporal(buffer_with([b, c], 4), a, 4, decay=60.0)
    np.testing.assert_allclose(out, a, atol=1e-20)


def test_temporal_hand_built():
    cur = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, -1.0]
    hist = [[0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 1.0], [0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0]]
    out, _ = aggregate_temporal(buffer_with([np.array(h) for h in hist], 9), np.array(cur), 9, decay=0.5)
    ref, _ = temporal_reference(cur, hist, 0.5)
    assert np.max(np.abs(out - ref)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 7), st.floats(0.01, 5.0))
def test_aggregators_match_reference(seed, k, param):
    rng = np.random.default_rng(seed)
    cur = random_action(rng)
    hist = [random_action(rng) for _ in range(k)]
    buf = buffer_with(hist, 20)
    out, w = aggregate_adaptive(buf, cur, 20, alpha=param)
    ref, rw = adaptive_reference(cur.tolist(), [h.tolist() for h in hist], param)
    assert np.max(np.abs(out - ref)) <= 1e-9 and np.max(np.abs(w - rw)) <= 1e-12
    out, w = aggregate_temporal(buf, cur, 20, decay=param)
    ref, rw = temporal_reference(cur.tolist(), [h.tolist() for h in hist], param)
    assert np.max(np.abs(out - ref)) <= 1e-9
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(np.abs(out[:6]) <= np.max(np.abs(np.vstack([cur] + hist)[:, :6]), axis=0) + 1e-12)


def test_buffer_ages_and_eviction():
    buf = EnsembleBuffer(window=2, horizon=5)
    for t in range(6):
        buf.add(t, np.arange(6 * 7, dtype=float).reshape(6, 7) + 100 * t)
    assert len(buf) == 3
    c = buf.candidates(6)
    # ages 1 and 2: row t - t0 of sequences from t0 = 5, 4
    np.testing.assert_array_equal(c[:, 0], [500 + 7, 400 + 14])
    with pytest.raises(ValueError):
        buf.add(5, np.zeros((6, 7)))


def test_buffer_clamped_by_horizon():
    buf = EnsembleBuffer(window=7, horizon=3)
    for t in range(10):
        buf.add(t, np.zeros((4, 7)))
    assert len(buf.candidates(10)) == 3


class Scripted:
    """Predicts a fixed open-loop plan: row j of the call at t is plan[t + j]."""

    def __init__(self, plan, horizon):
        self.plan, self.horizon = plan, horizon

    def __call__(self, t):
        idx = np.minimum(np.arange(t, t + self.horizon + 1), len(self.plan) - 1)
        return self.plan[idx]


def run(strategy, plan, horizon, steps, **kw):
    ex = ActionExecutor(StrategyConfig(strategy=strategy, **kw), horizon, record=True)
    model = Scripted(plan, horizon)
    out = [ex.policy_step(t, model(t) if ex.needs_prediction(t) else None) for t in range(steps)]
    return np.array(out), ex


def test_adaptive_equals_raw_under_constant_predictions():
    rng = np.random.default_rng(0)
    plan = rng.uniform(-1, 1, (30, 7))
    plan[:, 6] = np.sign(plan[:, 6])
    a, _ = run("adaptive", plan, 5, 20, window=3)
    r, _ = run("raw", plan, 5, 20, window=3)
    np.testing.assert_allclose(a, r, atol=1e-15)
    np.testing.assert_allclose(r, plan[:20])


def test_chunking_call_pattern():
    plan = np.tile(np.linspace(-1, 1, 7), (30, 1))
    _, ex = run("chunk", plan, 5, 10, chunk_len=2)
    assert ex.model_calls == 5
    _, ex = run("chunk", plan, 1, 9, chunk_len=4)  # chunk_len capped at N+1
    assert ex.model_calls == 5
    _, ex = run("temporal", plan, 5, 10)
    assert ex.model_calls == 10


def test_strategy_validation():
    with pytest.raises(ValueError):
        StrategyConfig(strategy="majority")
    with pytest.raises(ConfigurationError):
        StrategyConfig(alpha=0.0)
    ex = ActionExecutor(StrategyConfig(strategy="adaptive"), 3)
    with pytest.raises(ValueError):
        ex.policy_step(0, None)


def test_trace_jsonl(tmp_path):
    plan = np.tile(np.linspace(-1, 1, 7), (10, 1))
    _, ex = run("adaptive", plan, 3, 4, window=2)
    path = tmp_path / "trace.jsonl"
    write_trace(path, ex.trace)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 4
    assert set(rows[0]) == {"t", "strategy", "weights", "raw_prediction", "executed_action"}
    assert len(rows[3]["weights"]) == 3


def test_temporal_weights_normalized():
    w = temporal_weights(4, 0.1)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.diff(w) < 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.floats(0.1, 10.0))
def test_adaptive_weight_invariances(seed, k, scale):
    rng = np.random.default_rng(seed)
    cands = np.stack([random_action(rng) for _ in range(k + 1)])
    w = adaptive_weights(cands)
    scaled = cands.copy()
    scaled[:, :6] *= scale
    np.testing.assert_allclose(adaptive_weights(scaled), w, rtol=1e-12)
    perm = np.r_[0, 1 + rng.permutation(k)]
    np.testing.assert_allclose(adaptive_weights(cands[perm]), w[perm], rtol=1e-12)
    assert abs(w.sum() - 1) <= 1e-9 and np.all(w > 0)
    # weights are a convex combination, so the fused action is in the hull
    np.testing.assert_allclose(fuse(cands, w)[:6], w @ cands[:, :6], atol=1e-15)


def test_window_zero_is_raw():
    rng = np.random.default_rng(1)
    ex = ActionExecutor(StrategyConfig(strategy="adaptive", window=0), 4)
    for t in range(5):
        seq = rng.uniform(-1, 1, (5, 7))
        out = ex.policy_step(t, seq)
        np.testing.assert_array_equal(out[:6], seq[0, :6])


def test_single_entry_every_strategy_returns_current():
    seq = np.tile([0.2, -0.1, 0.4, 0.0, 0.3, -0.5, 1.0], (4, 1))
    for s in ("chunk", "temporal", "adaptive", "raw"):
        ex = ActionExecutor(StrategyConfig(strategy=s), 3)
        np.testing.assert_array_equal(ex.policy_step(0, seq), seq[0])
