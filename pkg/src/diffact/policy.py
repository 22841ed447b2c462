"""Closed-loop policy: encoder + action model + sampler + ensemble executor."""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from . import simulator as sim
from .autodiff.tensor import no_grad
from .data import DatasetStats, denormalize
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, regression_predict
from .ensemble import ActionExecutor, Strategy, StrategyConfig, window_size
from .errors import ConfigurationError
from .training import load_policy_parts


class DiffusionPolicy(sim.Policy):
    """Batched policy over many lockstep episodes, one executor and RNG stream each."""

    def __init__(self, model, encoder, stats: DatasetStats, *, objective: str = "diffusion",
                 sampler: SamplerConfig | None = None, strategy: StrategyConfig | None = None,
                 T_train: int = 100, record: bool = False):
        self.model = model
        self.encoder = encoder
        self.stats = stats
        self.objective = objective
        self.sampler = sampler or SamplerConfig()
        if objective == "regression" and self.sampler.cfg_scale != 1.0 and not model.has_null_cond:
            # a regression model has nothing to guide; sampling settings are unused
            self.sampler = replace(self.sampler, cfg_scale=1.0)
        if objective == "diffusion" and self.sampler.cfg_scale != 1.0 and not model.has_null_cond:
            raise ConfigurationError("cfg_scale != 1 needs a model trained with a null condition")
        self.strategy = strategy or StrategyConfig(window=window_size(stats.step_std))
        self.schedule = NoiseSchedule.cosine(T_train)
        self.horizon = model.config.horizon
        self.record = record
        self.dtype = model["head.w"].dtype

    @classmethod
    def from_checkpoint(cls, path, sampler: SamplerConfig | None = None,
                        strategy: Strategy | str | StrategyConfig | None = None, **kw) -> "DiffusionPolicy":
        model, encoder, stats, train, _ = load_policy_parts(path)
        if strategy is not None and not isinstance(strategy, StrategyConfig):
            strategy = StrategyConfig(strategy=Strategy(strategy), window=window_size(stats.step_std))
        return cls(model, encoder, stats, objective=train.objective, sampler=sampler,
                   strategy=strategy, T_train=train.T_train, **kw)

    def with_settings(self, sampler: SamplerConfig | None = None,
                      strategy: StrategyConfig | None = None) -> "DiffusionPolicy":
        return DiffusionPolicy(self.model, self.encoder, self.stats, objective=self.objective,
                               sampler=sampler or self.sampler, strategy=strategy or self.strategy,
                               T_train=self.schedule.T, record=self.record)

    def reset(self, specs: Sequence[sim.TaskSpec], seeds: Sequence[int]) -> None:
        self.task_ids = np.array([s.task_id for s in specs], dtype=np.int64)
        self.rngs = [np.random.default_rng(s) for s in seeds]
        self.executors = [ActionExecutor(self.strategy, self.horizon, record=self.record) for _ in specs]

    def predict(self, obs: np.ndarray, task_ids: np.ndarray, rngs) -> np.ndarray:
        """Normalized action sequences ``[B, N+1, 7]`` for a batch of observations."""
        with no_grad():
            cond = self.encoder(obs.astype(self.dtype), task_ids).data
        shape = (len(obs), self.model.config.seq_len, self.model.config.action_dim)
        if self.objective == "regression":
            return regression_predict(self.model, cond, shape)
        return ddim_sample(self.model, cond, self.sampler, rngs, self.schedule, shape=shape)

    def act(self, obs, indices, t, states=()):
        indices = np.asarray(indices)
        need = [r for r, e in enumerate(indices) if self.executors[e].needs_prediction(t)]
        seqs = {}
        if need:
            rows = indices[need]
            pred = self.predict(obs[need], self.task_ids[rows], [self.rngs[e] for e in rows])
            seqs = {int(e): pred[k] for k, e in enumerate(rows)}
        out = np.empty((len(indices), sim.ACTION_DIM))
        for r, e in enumerate(indices):
            norm = self.executors[e].policy_step(t, seqs.get(int(e)))
            out[r] = denormalize(norm, self.stats)
        return out

    @property
    def model_calls(self) -> int:
        return sum(x.model_calls for x in self.executors)
