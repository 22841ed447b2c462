"""End-to-end training of the cognition encoder and the action model."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import action_model as am
from . import simulator as sim
from .autodiff import Adam, backward, load_checkpoint, save_checkpoint
from .autodiff.tensor import precision
from .cognition import CognitionEncoder, EncoderConfig
from .data import DatasetStats, Episode, build_windows
from .diffusion import CFG_DROPOUT, DEFAULT_T, TRAIN_DRAWS, NoiseSchedule, regression_loss, training_loss
from .errors import ConfigurationError, DataError, TrainingError

log = logging.getLogger(__name__)

PAPER_LR = 2e-5
OBJECTIVES = ("diffusion", "regression")
LR_SCHEDULES = ("constant", "cosine")
# cosine decay ends at this fraction of the base learning rate
LR_FLOOR = 0.1


@dataclass
class TrainConfig:
    preset: str = "dit-tiny"
    horizon: int = 15
    objective: str = "diffusion"
    steps: int = 1000
    batch_size: int = 32
    draws: int = TRAIN_DRAWS
    lr: float = 1e-4
    lr_schedule: str = "constant"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    cond_dropout: float = CFG_DROPOUT
    obs_noise: float = sim.OBS_NOISE
    T_train: int = DEFAULT_T
    norm_mode: str = "quantile"
    dtype: str = "float32"
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")
        if self.batch_size < 1 or self.draws < 1 or self.steps < 0:
            raise ConfigurationError("batch_size and draws must be >= 1, steps >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.preset not in am.PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        self.betas = tuple(self.betas)

    def lr_at(self, step: int) -> float:
        """Learning rate for the update that follows ``step`` completed steps."""
        if self.lr_schedule == "constant" or self.steps == 0:
            return self.lr
        frac = min(step / self.steps, 1.0)
        return self.lr * (LR_FLOOR + (1 - LR_FLOOR) * 0.5 * (1 + math.cos(math.pi * frac)))

    def model_config(self):
        overrides = dict(self.model_overrides)
        overrides["horizon"] = self.horizon
        # CFG needs the learned null condition; the regression baseline trains without it
        overrides.setdefault("null_cond", self.objective == "diffusion" and self.cond_dropout > 0)
        return am.preset(self.preset, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Trainer:
    def __init__(self, config: TrainConfig, episodes: Sequence[Episode], stats: DatasetStats):
        if not episodes:
            raise DataError("training needs at least one episode")
        self.config = config
        self.stats = stats
        self.schedule = NoiseSchedule.cosine(config.T_train)
        with precision(config.dtype):
            self.model = am.build(config.model_config(), seed=config.seed)
            self.encoder = CognitionEncoder(
                EncoderConfig(obs_dim=episodes[0].observations.shape[1], num_tasks=sim.NUM_TASKS,
                              cond_dim=self.model.config.cond_dim), seed=config.seed)
            self.encoder.set_input_affine(stats.obs_affine())
        self.dtype = np.dtype(config.dtype)
        params = {f"model/{n}": t for n, t in self.model.items()}
        params.update({f"encoder/{n}": t for n, t in self.encoder.tensors.items()})
        self.params = params
        self.optimizer = Adam(params, lr=config.lr, betas=config.betas, eps=config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.windows = build_windows(episodes, config.horizon, stats)
        self.step = 0
        self.history: list[tuple[int, float]] = []

    @property
    def context_length(self) -> int:
        return self.model.config.seq_len + 1

    def train_step(self) -> float:
        cfg = self.config
        w = self.windows
        idx = self.rng.integers(0, len(w), size=cfg.batch_size)
        obs = sim.noisy_observation(w.obs[idx], self.rng, cfg.obs_noise).astype(self.dtype)
        x0 = w.actions[idx].astype(self.dtype)
        self.optimizer.zero_grad()
        self.optimizer.lr = cfg.lr_at(self.step)
        cond = self.encoder(obs, w.task_ids[idx])
        if cfg.objective == "diffusion":
            loss = training_loss(self.model, x0, cond, self.rng, self.schedule, cfg.draws, cfg.cond_dropout)
        else:
            loss = regression_loss(self.model, x0, cond)
        backward(loss)
        self.optimizer.step()
        self.step += 1
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {self.step}")
        self.history.append((self.step, value))
        return value

    def fit(self, steps: int | None = None, log_every: int = 100) -> list[tuple[int, float]]:
        total = self.config.steps if steps is None else steps
        for _ in range(total):
            loss = self.train_step()
            if log_every and self.step % log_every == 0:
                log.info("step %d loss %.5f", self.step, loss)
        return self.history

    # -- persistence -------------------------------------------------------
    def checkpoint_header(self) -> dict:
        return {
            "kind": "diffact-policy",
            "model": am.config_to_dict(self.model.config),
            "encoder": self.encoder.to_dict(),
            "train": self.config.to_dict(),
            "stats": self.stats.to_dict(),
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
        }

    def save(self, path) -> None:
        tensors = {n: t.data for n, t in self.params.items()}
        tensors.update(self.optimizer.state_arrays())
        save_checkpoint(path, tensors, self.checkpoint_header())

    def load(self, path) -> None:
        header, tensors = load_checkpoint(path)
        if header.get("model") != am.config_to_dict(self.model.config):
            raise ConfigurationError("checkpoint model config does not match this trainer")
        for n, t in self.params.items():
            if n not in tensors:
                raise DataError(f"checkpoint lacks tensor {n!r}")
            t.data = tensors[n].astype(t.dtype, copy=True)
        self.optimizer.load_state_arrays({k: v for k, v in tensors.items() if k.startswith("adam.")},
                                         header["step"])
        self.step = int(header["step"])
        self.rng.bit_generator.state = header["rng_state"]


def write_loss_csv(path, history: Sequence[tuple[int, float]], smoothing: float = 0.98) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ema = None
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "smoothed"])
        for s, v in history:
            ema = v if ema is None else smoothing * ema + (1 - smoothing) * v
            w.writerow([s, repr(v), repr(ema)])


def load_policy_parts(path):
    """Rebuild (model, encoder, stats, train config, header) from a checkpoint."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "diffact-policy":
        raise DataError(f"{path} is not a policy checkpoint")
    train = TrainConfig.from_dict(header["train"])
    with precision(train.dtype):
        model = am.build(am.config_from_dict(header["model"]), seed=0)
        encoder = CognitionEncoder(EncoderConfig(**header["encoder"]), seed=0)
    stats = DatasetStats.from_dict(header["stats"])
    encoder.set_input_affine(stats.obs_affine())
    model.load_arrays({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    encoder.load_arrays({k[len("encoder/"):]: v for k, v in tensors.items() if k.startswith("encoder/")})
    return model, encoder, stats, train, header
