import numpy as np
import pytest

from diffact.autodiff import Tensor, backward, ops
from diffact.cognition import CognitionEncoder, EncoderConfig
from diffact.errors import ConfigurationError, ShapeError


def make(**kw):
    return CognitionEncoder(EncoderConfig(obs_dim=22, num_tasks=4, **kw), seed=0)


def test_feature_shape():
    enc = make(cond_dim=64)
    assert enc(np.zeros((5, 22)), np.arange(5) % 4).shape == (5, 64)
    assert enc(np.zeros(22), 1).shape == (1, 64)


def test_tasks_are_distinct():
    enc = make()
    obs = np.random.default_rng(0).standard_normal((1, 22))
    a, b = enc(obs, [0]).data, enc(obs, [2]).data
    assert np.linalg.norm(a - b) > 0


def test_deterministic():
    enc = make()
    obs = np.random.default_rng(0).standard_normal((3, 22))
    assert enc(obs, [0, 1, 2]).data.tobytes() == enc(obs, [0, 1, 2]).data.tobytes()


def test_unknown_task_and_bad_width():
    enc = make()
    with pytest.raises(ConfigurationError):
        enc(np.zeros((1, 22)), [4])
    with pytest.raises(ConfigurationError):
        enc(np.zeros((1, 22)), [-1])
    with pytest.raises(ShapeError):
        enc(np.zeros((1, 21)), [0])


def test_gradients_reach_every_tensor():
    enc = make(cond_dim=8)
    for t in enc.tensors.values():
        t.requires_grad = True
    out = enc(np.random.default_rng(0).standard_normal((4, 22)), [0, 1, 1, 3])
    backward(ops.mse(out, np.ones((4, 8))))
    for name, t in enc.tensors.items():
        assert t.grad is not None and np.any(t.grad != 0), name
    # unused task rows get no gradient
    assert np.all(enc.tensors["task_emb"].grad[2] == 0)


def test_array_roundtrip():
    a, b = make(), CognitionEncoder(EncoderConfig(obs_dim=22, num_tasks=4), seed=9)
    b.load_arrays(a.arrays())
    obs = np.ones((1, 22))
    assert np.array_equal(a(obs, 0).data, b(obs, 0).data)


def test_input_affine_standardizes():
    enc = make()
    rng = np.random.default_rng(4)
    shift, scale = rng.standard_normal(22), rng.uniform(0.5, 3.0, 22)
    obs = rng.standard_normal((3, 22))
    plain = enc(((obs - shift) * scale).astype(np.float32), [0, 1, 2]).data
    enc.set_input_affine((shift, scale))
    np.testing.assert_allclose(enc(obs, [0, 1, 2]).data, plain, rtol=1e-5, atol=1e-6)
    with pytest.raises(ShapeError):
        enc.set_input_affine((shift[:3], scale[:3]))
    enc.set_input_affine(None)
    np.testing.assert_allclose(enc(((obs - shift) * scale), [0, 1, 2]).data, plain, rtol=1e-6)
