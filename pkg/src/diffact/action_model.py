"""Noise-prediction networks for action sequences.

Both models map ``(noisy_actions[B, N+1, 7], cond[B, cond_dim], step[B])`` to a
noise estimate with the shape of ``noisy_actions``.

The transformer lays its tokens out as ``[cond token] + N+1 action tokens``.
The cond token is the projected cognition feature plus an embedding of the
sinusoidal encoding of the denoising step. All tokens attend to each other.
The MLP model flattens the actions, concatenates the condition and the step
encoding, and runs a stack of residual gated-MLP blocks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.init import ones, truncated_normal, zeros
from .autodiff.tensor import Tensor, as_tensor, default_dtype
from .errors import ConfigurationError, ShapeError

ACTION_DIM = 7
# hidden width of the vision-language backbone the paper-scale presets assume
PAPER_COND_DIM = 4096
DESK_COND_DIM = 256
FREQ_DIM = 256


@dataclass(frozen=True)
class DiTConfig:
    num_layers: int = 3
    embed_dim: int = 128
    num_heads: int = 4
    horizon: int = 15
    action_dim: int = ACTION_DIM
    cond_dim: int = DESK_COND_DIM
    freq_dim: int = FREQ_DIM
    mlp_ratio: int = 4
    null_cond: bool = True
    kind: str = field(default="dit", init=False)

    def __post_init__(self):
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.horizon < 0:
            raise ConfigurationError("horizon N must be >= 0")
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.freq_dim % 2:
            raise ConfigurationError("freq_dim must be even")

    @property
    def seq_len(self) -> int:
        return self.horizon + 1

    @property
    def context_length(self) -> int:
        return self.horizon + 2


@dataclass(frozen=True)
class MLPConfig:
    num_layers: int = 3
    hidden_dim: int = 256
    horizon: int = 15
    action_dim: int = ACTION_DIM
    cond_dim: int = DESK_COND_DIM
    freq_dim: int = FREQ_DIM
    expansion: int = 4
    null_cond: bool = True
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("num_layers must be >= 1")
        if self.horizon < 0:
            raise ConfigurationError("horizon N must be >= 0")
        if self.freq_dim % 2:
            raise ConfigurationError("freq_dim must be even")

    @property
    def seq_len(self) -> int:
        return self.horizon + 1

    @property
    def in_dim(self) -> int:
        return self.seq_len * self.action_dim + self.cond_dim + self.freq_dim


PRESETS: dict[str, DiTConfig | MLPConfig] = {
    "dit-tiny": DiTConfig(num_layers=3, embed_dim=128, num_heads=4),
    "dit-small": DiTConfig(num_layers=6, embed_dim=384, num_heads=4, cond_dim=PAPER_COND_DIM),
    "dit-base": DiTConfig(num_layers=12, embed_dim=768, num_heads=12, cond_dim=PAPER_COND_DIM),
    "dit-large": DiTConfig(num_layers=24, embed_dim=1024, num_heads=16, cond_dim=PAPER_COND_DIM),
    "mlp3": MLPConfig(num_layers=3, hidden_dim=256, cond_dim=PAPER_COND_DIM),
    "mlp7": MLPConfig(num_layers=7, hidden_dim=1024, cond_dim=PAPER_COND_DIM),
}


def preset(name: str, **overrides) -> DiTConfig | MLPConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = asdict(PRESETS[name])
    base.pop("kind")
    base.update(overrides)
    return type(PRESETS[name])(**base)


def config_to_dict(cfg: DiTConfig | MLPConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> DiTConfig | MLPConfig:
    d = dict(d)
    kind = d.pop("kind", "dit")
    return (DiTConfig if kind == "dit" else MLPConfig)(**d)


def sinusoidal_encoding(i, dim: int) -> np.ndarray:
    """Interleaved sin/cos encoding: ``[sin(i w_0), cos(i w_0), sin(i w_1), ...]``.

    ``w_j = 10000 ** (-2j / dim)``. A scalar ``i`` gives shape ``(dim,)``, an
    array of steps gives ``(len(i), dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"sinusoidal encoding needs a positive even dim, got {dim}")
    steps = np.asarray(i, dtype=np.float64)
    freqs = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = steps[..., None] * freqs
    out = np.empty(steps.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


class ModelParams:
    """Named parameter tensors of one model, plus its config."""

    def __init__(self, config: DiTConfig | MLPConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def has_null_cond(self) -> bool:
        return "null_cond" in self.tensors

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            if n not in arrays:
                raise KeyError(f"missing tensor {n!r}")
            if arrays[n].shape != t.shape:
                raise ShapeError(f"tensor {n!r}: stored shape {arrays[n].shape} != {t.shape}")
            t.data = arrays[n].astype(t.dtype, copy=True)

    def __call__(self, noisy_actions, cond, steps, **kw):
        if self.config.kind == "dit":
            return forward_dit(self, noisy_actions, cond, steps, **kw)
        return forward_mlp(self, noisy_actions, cond, steps)


def _linear_params(out: dict, name: str, n_in: int, n_out: int, seed: int, dtype) -> None:
    out[f"{name}.w"] = truncated_normal((n_in, n_out), seed, f"{name}.w", dtype=dtype)
    out[f"{name}.b"] = zeros((n_out,), f"{name}.b", dtype=dtype)


def _ln_params(out: dict, name: str, d: int, dtype) -> None:
    out[f"{name}.w"] = ones((d,), f"{name}.w", dtype=dtype)
    out[f"{name}.b"] = zeros((d,), f"{name}.b", dtype=dtype)


def build(config: DiTConfig | MLPConfig, seed: int = 0, dtype=None) -> ModelParams:
    """Initialize a model deterministically from ``seed``."""
    dtype = dtype or default_dtype()
    t: dict[str, Tensor] = {}
    if config.kind == "dit":
        d = config.embed_dim
        _linear_params(t, "cond_proj", config.cond_dim, d, seed, dtype)
        _linear_params(t, "t_mlp.0", config.freq_dim, d, seed, dtype)
        _linear_params(t, "t_mlp.1", d, d, seed, dtype)
        _linear_params(t, "act_proj", config.action_dim, d, seed, dtype)
        t["pos_emb"] = truncated_normal((config.seq_len, d), seed, "pos_emb", dtype=dtype)
        for layer in range(config.num_layers):
            p = f"blocks.{layer}"
            _ln_params(t, f"{p}.ln1", d, dtype)
            _linear_params(t, f"{p}.attn.qkv", d, 3 * d, seed, dtype)
            _linear_params(t, f"{p}.attn.out", d, d, seed, dtype)
            _ln_params(t, f"{p}.ln2", d, dtype)
            _linear_params(t, f"{p}.mlp.fc1", d, config.mlp_ratio * d, seed, dtype)
            _linear_params(t, f"{p}.mlp.fc2", config.mlp_ratio * d, d, seed, dtype)
        _ln_params(t, "ln_f", d, dtype)
        _linear_params(t, "head", d, config.action_dim, seed, dtype)
    elif config.kind == "mlp":
        d, e = config.hidden_dim, config.expansion * config.hidden_dim
        _linear_params(t, "in_proj", config.in_dim, d, seed, dtype)
        for layer in range(config.num_layers):
            p = f"blocks.{layer}"
            _ln_params(t, f"{p}.ln", d, dtype)
            _linear_params(t, f"{p}.gate", d, e, seed, dtype)
            _linear_params(t, f"{p}.up", d, e, seed, dtype)
            _linear_params(t, f"{p}.down", e, d, seed, dtype)
        _ln_params(t, "ln_f", d, dtype)
        _linear_params(t, "head", d, config.seq_len * config.action_dim, seed, dtype)
    else:
        raise ConfigurationError(f"unknown model kind {config.kind!r}")
    if config.null_cond:
        t["null_cond"] = truncated_normal((config.cond_dim,), seed, "null_cond", dtype=dtype)
    return ModelParams(config, t)


def dit_param_count(cfg: DiTConfig) -> int:
    """Closed-form parameter count of :func:`build` for a transformer config."""
    d, r = cfg.embed_dim, cfg.mlp_ratio
    per_layer = (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (2 * d) + (r * d * d + r * d) + (r * d * d + d)
    return ((cfg.cond_dim * d + d) + (cfg.freq_dim * d + d) + (d * d + d)
            + (cfg.action_dim * d + d) + cfg.seq_len * d
            + cfg.num_layers * per_layer + 2 * d + (d * cfg.action_dim + cfg.action_dim)
            + (cfg.cond_dim if cfg.null_cond else 0))


def mlp_param_count(cfg: MLPConfig) -> int:
    """Closed-form parameter count of :func:`build` for an MLP config."""
    d, e = cfg.hidden_dim, cfg.expansion * cfg.hidden_dim
    out = cfg.seq_len * cfg.action_dim
    per_layer = 2 * d + 2 * (d * e + e) + (e * d + d)
    return ((cfg.in_dim * d + d) + cfg.num_layers * per_layer + 2 * d + (d * out + out)
            + (cfg.cond_dim if cfg.null_cond else 0))


def param_count(cfg: DiTConfig | MLPConfig) -> int:
    return dit_param_count(cfg) if cfg.kind == "dit" else mlp_param_count(cfg)


def _check_inputs(cfg, noisy_actions: Tensor, cond: Tensor, steps: np.ndarray) -> None:
    if noisy_actions.ndim != 3 or noisy_actions.shape[1:] != (cfg.seq_len, cfg.action_dim):
        raise ShapeError(f"noisy actions must be (B, {cfg.seq_len}, {cfg.action_dim}), "
                         f"got {noisy_actions.shape}")
    if cond.ndim != 2 or cond.shape != (noisy_actions.shape[0], cfg.cond_dim):
        raise ShapeError(f"cond must be ({noisy_actions.shape[0]}, {cfg.cond_dim}), got {cond.shape}")
    if steps.shape != (noisy_actions.shape[0],):
        raise ShapeError(f"steps must have shape ({noisy_actions.shape[0]},), got {steps.shape}")


def _steps(steps, batch: int) -> np.ndarray:
    steps = np.asarray(steps)
    if steps.ndim == 0:
        steps = np.full((batch,), int(steps))
    return steps


def _attention(p: ModelParams, prefix: str, h: Tensor, num_heads: int) -> tuple[Tensor, Tensor]:
    b, n, d = h.shape
    dh = d // num_heads
    qkv = ops.linear(h, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (b, n, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1)
    out = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    return ops.linear(out, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"]), attn


def forward_dit(params: ModelParams, noisy_actions, cond, steps, return_attention: bool = False):
    """Predict noise for a batch of noisy action sequences with the transformer.

    With ``return_attention=True`` returns ``(eps_hat, [attn per layer])`` where each
    attention map has shape ``(B, heads, N+2, N+2)``.
    """
    cfg: DiTConfig = params.config
    x = as_tensor(noisy_actions)
    c = as_tensor(cond, like=x)
    steps = _steps(steps, x.shape[0])
    _check_inputs(cfg, x, c, steps)
    b = x.shape[0]
    freq = Tensor(sinusoidal_encoding(steps, cfg.freq_dim).astype(x.dtype))
    temb = ops.linear(ops.gelu(ops.linear(freq, params["t_mlp.0.w"], params["t_mlp.0.b"])),
                      params["t_mlp.1.w"], params["t_mlp.1.b"])
    cond_tok = ops.add(ops.linear(c, params["cond_proj.w"], params["cond_proj.b"]), temb)
    act_tok = ops.add(ops.linear(x, params["act_proj.w"], params["act_proj.b"]), params["pos_emb"])
    h = ops.concat([ops.reshape(cond_tok, (b, 1, cfg.embed_dim)), act_tok], axis=1)
    maps = []
    for layer in range(cfg.num_layers):
        pre = f"blocks.{layer}"
        a, attn = _attention(params, f"{pre}.attn",
                             ops.layer_norm(h, params[f"{pre}.ln1.w"], params[f"{pre}.ln1.b"]),
                             cfg.num_heads)
        maps.append(attn)
        h = ops.add(h, a)
        m = ops.layer_norm(h, params[f"{pre}.ln2.w"], params[f"{pre}.ln2.b"])
        m = ops.linear(ops.gelu(ops.linear(m, params[f"{pre}.mlp.fc1.w"], params[f"{pre}.mlp.fc1.b"])),
                       params[f"{pre}.mlp.fc2.w"], params[f"{pre}.mlp.fc2.b"])
        h = ops.add(h, m)
    h = ops.layer_norm(h[:, 1:, :], params["ln_f.w"], params["ln_f.b"])
    out = ops.linear(h, params["head.w"], params["head.b"])
    if return_attention:
        return out, maps
    return out


def forward_mlp(params: ModelParams, noisy_actions, cond, steps):
    """Predict noise with the residual gated-MLP baseline."""
    cfg: MLPConfig = params.config
    x = as_tensor(noisy_actions)
    c = as_tensor(cond, like=x)
    steps = _steps(steps, x.shape[0])
    _check_inputs(cfg, x, c, steps)
    b = x.shape[0]
    freq = Tensor(sinusoidal_encoding(steps, cfg.freq_dim).astype(x.dtype))
    inp = ops.concat([ops.reshape(x, (b, cfg.seq_len * cfg.action_dim)), c, freq], axis=1)
    h = ops.linear(inp, params["in_proj.w"], params["in_proj.b"])
    for layer in range(cfg.num_layers):
        pre = f"blocks.{layer}"
        z = ops.layer_norm(h, params[f"{pre}.ln.w"], params[f"{pre}.ln.b"])
        gated = ops.mul(ops.gelu(ops.linear(z, params[f"{pre}.gate.w"], params[f"{pre}.gate.b"])),
                        ops.linear(z, params[f"{pre}.up.w"], params[f"{pre}.up.b"]))
        h = ops.add(h, ops.linear(gated, params[f"{pre}.down.w"], params[f"{pre}.down.b"]))
    h = ops.layer_norm(h, params["ln_f.w"], params["ln_f.b"])
    out = ops.linear(h, params["head.w"], params["head.b"])
    return ops.reshape(out, (b, cfg.seq_len, cfg.action_dim))
