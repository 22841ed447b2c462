"""Demonstration episodes: generation, statistics, normalization, windows, storage.

Dataset directory layout::

    manifest.json   schema_version, episode_count, obs_dim, action_dim,
                    task_counts, stats, seed, extra
    episodes.bin    concatenated records, each ``u32 length`` + payload

Record payload: ``u32 header_len`` + JSON header (task spec, source_id,
num_frames, obs_dim), followed by float64 observations ``[T, obs_dim]``,
float64 actions ``[T, 7]`` and int64 timesteps ``[T]``, all little-endian.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import simulator as sim
from .errors import DataError

SCHEMA_VERSION = 1
ACTION_DIM = 7
CONT = 6
TRANSLATION = 3
# smallest observation std used for input standardization (below it, noise would dominate)
OBS_STD_FLOOR = 0.02
# noise injected into executed demo actions (labels stay clean)
DEMO_NOISE = 0.01
DEMO_GRIP_FLIP = 0.03
NORM_MODES = ("quantile", "minmax")


@dataclass
class Episode:
    observations: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    task: sim.TaskSpec
    source_id: str = ""

    def __post_init__(self):
        if len(self.actions) < 1:
            raise DataError("an episode needs at least one frame")
        if not (len(self.observations) == len(self.actions) == len(self.timesteps)):
            raise DataError("observations, actions and timesteps must have equal length")
        if np.any(np.diff(self.timesteps) != 1):
            raise DataError("episode timesteps must be contiguous")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class DatasetStats:
    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    q01: np.ndarray
    q99: np.ndarray
    step_std: float
    count: int
    mode: str = "quantile"
    obs_mean: np.ndarray | None = None
    obs_std: np.ndarray | None = None

    def bounds(self, mode: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        mode = mode or self.mode
        if mode == "quantile":
            return self.q01, self.q99
        if mode == "minmax":
            return self.min, self.max
        raise ValueError(f"unknown normalization mode {mode!r}; expected one of {NORM_MODES}")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in ("min", "max", "mean", "std", "q01", "q99")}
        out.update(step_std=self.step_std, count=self.count, mode=self.mode)
        if self.obs_mean is not None:
            out.update(obs_mean=self.obs_mean.tolist(), obs_std=self.obs_std.tolist())
        return out

    def obs_affine(self) -> tuple[np.ndarray, np.ndarray] | None:
        """``(shift, scale)`` that standardizes observations; constant columns pass through."""
        if self.obs_mean is None:
            return None
        std = self.obs_std
        scale = np.where(std > 0, 1.0 / np.maximum(std, OBS_STD_FLOOR), 1.0)
        return self.obs_mean, scale

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        arrays = {k: np.asarray(d[k], dtype=np.float64) for k in ("min", "max", "mean", "std", "q01", "q99")}
        obs = {k: np.asarray(d[k], dtype=np.float64) for k in ("obs_mean", "obs_std") if k in d}
        return cls(**arrays, **obs, step_std=float(d["step_std"]), count=int(d["count"]),
                   mode=d.get("mode", "quantile"))


def compute_stats(actions: Iterable[np.ndarray] | Sequence[Episode], mode: str = "quantile") -> DatasetStats:
    """Per-dimension moments (population std); ``step_std`` averages the translation stds.

    Given episodes, observation mean and std are recorded as well.
    """
    items = list(actions)
    obs_mean = obs_std = None
    if items and isinstance(items[0], Episode):
        o = np.concatenate([ep.observations for ep in items], axis=0).astype(np.float64)
        obs_mean = o.mean(axis=0)
        obs_std = np.where(o.max(axis=0) > o.min(axis=0), o.std(axis=0), 0.0)
        items = [ep.actions for ep in items]
    if not items:
        raise DataError("cannot compute statistics of an empty dataset")
    a = np.concatenate([np.atleast_2d(x) for x in items], axis=0).astype(np.float64)
    if a.shape[0] == 0:
        raise DataError("cannot compute statistics of an empty dataset")
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    lo, hi = a.min(axis=0), a.max(axis=0)
    # constant columns: exact zero instead of the rounding residue of the mean
    std = np.where(hi > lo, a.std(axis=0), 0.0)
    return DatasetStats(
        min=lo, max=hi, mean=a.mean(axis=0), std=std,
        q01=np.quantile(a, 0.01, axis=0), q99=np.quantile(a, 0.99, axis=0),
        step_std=float(std[:TRANSLATION].mean()), count=int(a.shape[0]), mode=mode,
        obs_mean=obs_mean, obs_std=obs_std)


def normalize(a: np.ndarray, stats: DatasetStats, mode: str | None = None) -> np.ndarray:
    """Affine map of continuous dims from [lo, hi] to [-1, 1] (clipped); gripper {0,1} -> {-1,1}."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = stats.bounds(mode)
    lo, hi = lo[:CONT], hi[:CONT]
    span = hi - lo
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    out = np.empty_like(a)
    out[..., :CONT] = np.where(degenerate, 0.0, 2.0 * (np.clip(a[..., :CONT], lo, hi) - lo) / safe - 1.0)
    out[..., CONT] = 2.0 * a[..., CONT] - 1.0
    return out


def denormalize(a: np.ndarray, stats: DatasetStats, mode: str | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = stats.bounds(mode)
    lo, hi = lo[:CONT], hi[:CONT]
    out = np.empty_like(a)
    out[..., :CONT] = lo + (np.clip(a[..., :CONT], -1.0, 1.0) + 1.0) * 0.5 * (hi - lo)
    out[..., CONT] = (a[..., CONT] > 0.0).astype(np.float64)
    return out


def stationary_action(last: np.ndarray) -> np.ndarray:
    out = np.zeros(ACTION_DIM)
    out[CONT] = last[CONT]
    return out


def window(episode: Episode, t: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Observation at ``t`` and actions ``t..t+horizon``, padded past the end with stationary actions."""
    n = len(episode)
    if n == 0:
        raise DataError("empty episode")
    if not 0 <= t < n:
        raise IndexError(f"frame {t} outside episode of length {n}")
    real = episode.actions[t:t + horizon + 1]
    pad = horizon + 1 - len(real)
    if pad:
        real = np.vstack([real, np.tile(stationary_action(episode.actions[-1]), (pad, 1))])
    return episode.observations[t], real


@dataclass
class WindowSet:
    obs: np.ndarray
    task_ids: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)


def build_windows(episodes: Sequence[Episode], horizon: int, stats: DatasetStats) -> WindowSet:
    obs, ids, acts = [], [], []
    for ep in episodes:
        for t in range(len(ep)):
            o, a = window(ep, t, horizon)
            obs.append(o)
            ids.append(ep.task.task_id)
            acts.append(a)
    return WindowSet(np.asarray(obs), np.asarray(ids, dtype=np.int64),
                     normalize(np.asarray(acts), stats))


# -- generation --------------------------------------------------------------

def perturb(action: np.ndarray, state: sim.EnvState, rng: np.random.Generator,
            noise: float, grip_flip: float) -> np.ndarray:
    """Executed action for noise-injected collection: jittered translation and an
    occasional premature close while empty-handed.  The label stays the clean action."""
    out = action.copy()
    if noise > 0:
        out[:3] += rng.normal(0.0, noise, 3)
    if grip_flip > 0 and state.held < 0 and rng.random() < grip_flip:
        out[6] = 1.0
    return out


def expert_episode(task, rng: np.random.Generator, source_id: str = "", noise: float = DEMO_NOISE,
                   grip_flip: float = DEMO_GRIP_FLIP) -> tuple[Episode, bool]:
    """Roll out the scripted expert on a fresh scene; returns (episode, solved).

    With ``noise``/``grip_flip`` > 0 the executed actions are perturbed so the
    demonstrations also show how the expert recovers from small mistakes.
    """
    spec, state = sim.sample_scene(task, rng)
    obs, acts = [], []
    solved = False
    for _ in range(sim.HORIZON[spec.task]):
        try:
            a = sim.scripted_expert(spec, state)
        except sim.UnsolvableState:
            break
        obs.append(sim.observe(state, spec))
        acts.append(a)
        state = sim.step(state, perturb(a, state, rng, noise, grip_flip))
        if sim.collided(spec, state):
            break
        if sim.is_success(spec, state):
            solved = True
            break
    n = len(acts)
    return Episode(np.asarray(obs), np.asarray(acts), np.arange(n, dtype=np.int64), spec, source_id), solved


def generate(task_counts: dict, seed: int) -> list[Episode]:
    """Expert demonstrations; unsolved episodes are dropped."""
    episodes = []
    for task, count in task_counts.items():
        task = sim.Task.parse(task)
        rng = np.random.default_rng([int(seed), int(task)])
        made = 0
        attempt = 0
        while made < count:
            ep, ok = expert_episode(task, rng, source_id=f"{task.name.lower()}-{seed}-{attempt}")
            attempt += 1
            if ok:
                episodes.append(ep)
                made += 1
            elif attempt > 10 * count + 10:
                raise DataError(f"expert keeps failing on {task.name.lower()}")
    return episodes


# -- storage -----------------------------------------------------------------

def encode_episode(ep: Episode) -> bytes:
    header = json.dumps({"task": ep.task.to_dict(), "source_id": ep.source_id,
                         "num_frames": len(ep), "obs_dim": int(ep.observations.shape[1])},
                        sort_keys=True).encode("utf-8")
    body = (np.ascontiguousarray(ep.observations, dtype="<f8").tobytes()
            + np.ascontiguousarray(ep.actions, dtype="<f8").tobytes()
            + np.ascontiguousarray(ep.timesteps, dtype="<i8").tobytes())
    return struct.pack("<I", len(header)) + header + body


def decode_episode(payload: bytes) -> Episode:
    try:
        (hlen,) = struct.unpack_from("<I", payload, 0)
        header = json.loads(payload[4:4 + hlen].decode("utf-8"))
        n, d = header["num_frames"], header["obs_dim"]
        off = 4 + hlen
        obs = np.frombuffer(payload, "<f8", n * d, off).reshape(n, d).copy()
        off += 8 * n * d
        acts = np.frombuffer(payload, "<f8", n * ACTION_DIM, off).reshape(n, ACTION_DIM).copy()
        off += 8 * n * ACTION_DIM
        ts = np.frombuffer(payload, "<i8", n, off).copy()
        off += 8 * n
    except (struct.error, ValueError, KeyError) as exc:
        raise DataError(f"malformed episode record: {exc}") from exc
    if off != len(payload):
        raise DataError("episode record has trailing bytes")
    return Episode(obs, acts, ts, sim.TaskSpec.from_dict(header["task"]), header["source_id"])


def write_dataset(path, episodes: Sequence[Episode], stats: DatasetStats | None = None,
                  seed: int | None = None, extra: dict | None = None) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    stats = stats or compute_stats(episodes)
    counts: dict[str, int] = {}
    for ep in episodes:
        counts[ep.task.task.name.lower()] = counts.get(ep.task.task.name.lower(), 0) + 1
    tmp = path / "episodes.bin.tmp"
    with tmp.open("wb") as fh:
        for ep in episodes:
            rec = encode_episode(ep)
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)
    os.replace(tmp, path / "episodes.bin")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "episode_count": len(episodes),
        "obs_dim": int(episodes[0].observations.shape[1]) if episodes else sim.OBS_DIM,
        "action_dim": ACTION_DIM,
        "task_counts": dict(sorted(counts.items())),
        "stats": stats.to_dict(),
        "seed": seed,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset manifest in {path}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported dataset schema {manifest.get('schema_version')}")
    return manifest


def read_dataset(path) -> tuple[list[Episode], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / "episodes.bin").read_bytes()
    episodes = []
    off = 0
    while off < len(blob):
        if off + 4 > len(blob):
            raise DataError("truncated episode length prefix")
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + n > len(blob):
            raise DataError("truncated episode record")
        episodes.append(decode_episode(blob[off:off + n]))
        off += n
    if len(episodes) != manifest["episode_count"]:
        raise DataError(f"manifest lists {manifest['episode_count']} episodes, file holds {len(episodes)}")
    return episodes, manifest
