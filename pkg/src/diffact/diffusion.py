"""Forward noising, the noise-prediction loss, and DDIM sampling with guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor, no_grad
from .errors import ConfigurationError, TrainingError

DEFAULT_T = 100
TRAIN_DRAWS = 8
CFG_DROPOUT = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or len(b) == 0:
            raise ConfigurationError("schedule needs a non-empty 1-D beta array")
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ConfigurationError("betas must lie strictly inside (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0):
            raise ConfigurationError("alpha_bars must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(betas, alphas, np.cumprod(alphas))

    @classmethod
    def cosine(cls, T: int = DEFAULT_T, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        """Squared-cosine schedule: alpha_bar(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)."""
        if T < 1:
            raise ConfigurationError("T must be >= 1")

        def f(t):
            return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

        betas = [min(1 - f(i + 1) / f(i), max_beta) for i in range(T)]
        return cls.from_betas(betas)

    @classmethod
    def linear(cls, T: int = DEFAULT_T, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, T))


@dataclass(frozen=True)
class SamplerConfig:
    num_ddim_steps: int = 10
    cfg_scale: float = 1.5
    eta: float = 0.0
    clip_denoised: bool = True

    def __post_init__(self):
        if self.num_ddim_steps < 1:
            raise ConfigurationError("num_ddim_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ConfigurationError("cfg_scale must be >= 0")
        if self.eta < 0:
            raise ConfigurationError("eta must be >= 0")


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``; ``t`` is a step or one step per row."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise IndexError(f"diffusion step out of range [0, {schedule.T})")
    ab = schedule.alpha_bars[t]
    if t.ndim:
        ab = _bcast(ab, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def null_condition(model) -> np.ndarray:
    if not getattr(model, "has_null_cond", False):
        raise ConfigurationError("model has no null-condition embedding; classifier-free "
                                 "guidance needs cfg_scale == 1 or a model trained with it")
    return model["null_cond"].data


def training_loss(model, x0: np.ndarray, cond, rng: np.random.Generator,
                  schedule: NoiseSchedule, draws: int = TRAIN_DRAWS,
                  cond_dropout: float = CFG_DROPOUT) -> Tensor:
    """Noise-prediction MSE over ``draws`` independent (t, eps) samples per example.

    ``cond`` may be a graph tensor (the encoder output); rows selected by the
    dropout mask are swapped for the model's learned null condition.
    """
    x0 = np.asarray(x0)
    cond = as_tensor(cond)
    b = x0.shape[0]
    rows = np.repeat(np.arange(b), draws)
    x0r = x0[rows]
    t = rng.integers(0, schedule.T, size=len(rows))
    eps = rng.standard_normal(x0r.shape).astype(x0.dtype)
    xt = q_sample(schedule, x0r, t, eps)
    c = ops.getitem(cond, rows) if draws > 1 else cond
    if cond_dropout > 0:
        null = model["null_cond"] if getattr(model, "has_null_cond", False) else None
        if null is None:
            raise ConfigurationError("condition dropout needs a model with a null-condition embedding")
        drop = (rng.random(len(rows)) < cond_dropout).astype(x0.dtype)[:, None]
        c = ops.add(ops.mul(c, 1.0 - drop), ops.mul(null, drop))
    pred = model(Tensor(xt), c, t)
    loss = ops.mse(pred, eps)
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite diffusion loss {float(loss.data)}")
    return loss


def regression_loss(model, x0: np.ndarray, cond) -> Tensor:
    """MSE baseline: regress the clean sequence from the condition alone."""
    x0 = np.asarray(x0)
    pred = model(Tensor(np.zeros_like(x0)), as_tensor(cond), np.zeros(len(x0), dtype=np.int64))
    loss = ops.mse(pred, x0)
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite regression loss {float(loss.data)}")
    return loss


def regression_predict(model, cond: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    with no_grad():
        out = model(Tensor(np.zeros(shape, dtype=np.asarray(cond).dtype)), Tensor(cond),
                    np.zeros(shape[0], dtype=np.int64))
    return np.clip(np.asarray(getattr(out, "data", out)), -1.0, 1.0)


def combine_guidance(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """``eps_uncond + scale * (eps_cond - eps_uncond)``; scale 1 returns ``eps_cond`` as is."""
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, n: int) -> np.ndarray:
    """``n`` evenly spaced steps from T-1 down to 0."""
    if not 1 <= n <= T:
        raise ConfigurationError(f"num_ddim_steps must be in [1, {T}], got {n}")
    return np.round(np.linspace(T - 1, 0, n)).astype(np.int64)


def _predict_eps(model, x: np.ndarray, cond: np.ndarray, t: int, scale: float,
                 null: np.ndarray | None) -> np.ndarray:
    b = x.shape[0]
    steps = np.full(b, t, dtype=np.int64)
    if scale == 1.0:
        out = model(Tensor(x), Tensor(cond), steps)
        return np.asarray(getattr(out, "data", out))
    both = np.concatenate([cond, np.broadcast_to(null.astype(cond.dtype), cond.shape)], axis=0)
    out = model(Tensor(np.concatenate([x, x], axis=0)), Tensor(both), np.concatenate([steps, steps]))
    out = np.asarray(getattr(out, "data", out))
    return combine_guidance(out[:b], out[b:], scale)


def _normal(rng, shape, dtype) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape).astype(dtype)
    # one independent generator per batch row
    return np.stack([r.standard_normal(shape[1:]) for r in rng]).astype(dtype)


def ddim_sample(model, cond: np.ndarray, cfg: SamplerConfig, rng, schedule: NoiseSchedule,
                shape: tuple[int, ...] | None = None, x_init: np.ndarray | None = None) -> np.ndarray:
    """Denoise pure noise into action sequences with DDIM and classifier-free guidance.

    ``rng`` is a Generator or a sequence of Generators, one per row of ``cond``.
    With ``eta == 0`` the result depends only on the initial noise and ``cond``.
    """
    cond = np.asarray(cond)
    null = null_condition(model) if cfg.cfg_scale != 1.0 else None
    if x_init is not None:
        x = np.array(x_init, dtype=cond.dtype, copy=True)
    else:
        if shape is None:
            cfg_model = getattr(model, "config", None)
            if cfg_model is None:
                raise ConfigurationError("shape is required for models without a config")
            shape = (cond.shape[0], cfg_model.seq_len, cfg_model.action_dim)
        x = _normal(rng, shape, cond.dtype)
    ts = ddim_timesteps(schedule.T, cfg.num_ddim_steps)
    ab = schedule.alpha_bars
    with no_grad():
        for i, t in enumerate(ts):
            ab_t = ab[t]
            ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
            eps = _predict_eps(model, x, cond, int(t), cfg.cfg_scale, null)
            x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
            if cfg.clip_denoised:
                x0 = np.clip(x0, -1.0, 1.0)
            sigma = 0.0
            if cfg.eta > 0 and i + 1 < len(ts):
                sigma = cfg.eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)
            x = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
            if sigma > 0:
                x = x + sigma * _normal(rng, x.shape, x.dtype)
            x = x.astype(cond.dtype, copy=False)
    return np.clip(x, -1.0, 1.0)

