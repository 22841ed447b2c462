"""Stand-in for the vision-language backbone.

A task-embedding table and a 2-layer GELU MLP turn ``(observation state, task id)``
into the cognition feature that conditions the action model. It is trained
jointly with the action model through the diffusion loss.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ops
from .autodiff.init import truncated_normal, zeros
from .autodiff.tensor import Tensor, as_tensor, default_dtype
from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    obs_dim: int
    num_tasks: int
    cond_dim: int = 256
    task_embed_dim: int = 32
    hidden_dim: int = 256

    def __post_init__(self):
        if min(self.obs_dim, self.num_tasks, self.cond_dim, self.task_embed_dim, self.hidden_dim) < 1:
            raise ConfigurationError(f"all encoder widths must be positive: {self}")


class CognitionEncoder:
    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=None):
        dtype = dtype or default_dtype()
        c = config
        self.config = c
        n_in = c.obs_dim + c.task_embed_dim
        self.tensors: dict[str, Tensor] = {
            "task_emb": truncated_normal((c.num_tasks, c.task_embed_dim), seed, "enc.task_emb", dtype=dtype),
            # fan-in scaling keeps the observation signal at unit scale through the MLP
            "fc1.w": truncated_normal((n_in, c.hidden_dim), seed, "enc.fc1.w", std=n_in ** -0.5, dtype=dtype),
            "fc1.b": zeros((c.hidden_dim,), "enc.fc1.b", dtype=dtype),
            "fc2.w": truncated_normal((c.hidden_dim, c.cond_dim), seed, "enc.fc2.w", std=c.hidden_dim ** -0.5,
                                      dtype=dtype),
            "fc2.b": zeros((c.cond_dim,), "enc.fc2.b", dtype=dtype),
        }
        # fixed input standardization, set from dataset statistics (not trained)
        self.obs_shift: np.ndarray | None = None
        self.obs_scale: np.ndarray | None = None

    def set_input_affine(self, affine: tuple[np.ndarray, np.ndarray] | None) -> None:
        if affine is None:
            self.obs_shift = self.obs_scale = None
            return
        shift, scale = (np.asarray(v, dtype=self.tensors["fc1.w"].dtype) for v in affine)
        if shift.shape != (self.config.obs_dim,) or scale.shape != (self.config.obs_dim,):
            raise ShapeError(f"input affine must have shape ({self.config.obs_dim},)")
        self.obs_shift, self.obs_scale = shift, scale

    def __call__(self, obs, task_ids) -> Tensor:
        return encode(self, obs, task_ids)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            if arrays[n].shape != t.shape:
                raise ShapeError(f"encoder tensor {n!r}: stored shape {arrays[n].shape} != {t.shape}")
            t.data = arrays[n].astype(t.dtype, copy=True)

    def to_dict(self) -> dict:
        return asdict(self.config)


def encode(encoder: CognitionEncoder, obs, task_ids) -> Tensor:
    """Cognition features of shape ``(B, cond_dim)`` for a batch of observations."""
    cfg = encoder.config
    p = encoder.tensors
    obs = as_tensor(obs, like=p["fc1.w"])
    if obs.ndim == 1:
        obs = ops.reshape(obs, (1, obs.shape[0]))
    if obs.shape[-1] != cfg.obs_dim:
        raise ShapeError(f"observation width {obs.shape[-1]} != encoder obs_dim {cfg.obs_dim}")
    ids = np.atleast_1d(np.asarray(task_ids))
    if not np.issubdtype(ids.dtype, np.integer) or np.any(ids < 0) or np.any(ids >= cfg.num_tasks):
        raise ConfigurationError(f"unknown task id in {ids.tolist()} (have {cfg.num_tasks} tasks)")
    if ids.shape[0] != obs.shape[0]:
        if ids.shape[0] != 1:
            raise ShapeError("need one task id per observation row")
        ids = np.repeat(ids, obs.shape[0])
    if encoder.obs_shift is not None:
        obs = ops.mul(ops.sub(obs, Tensor(encoder.obs_shift)), Tensor(encoder.obs_scale))
    h = ops.concat([obs, ops.embedding(p["task_emb"], ids)], axis=1)
    h = ops.gelu(ops.linear(h, p["fc1.w"], p["fc1.b"]))
    return ops.linear(h, p["fc2.w"], p["fc2.b"])
