"""Kinematic tabletop environment with scripted experts.

The end effector moves by clipped relative deltas. Closing the gripper within
``GRASP_RADIUS`` of a free object attaches it; opening drops the held object
onto whatever lies directly below it (another block or the table at z=0).
No dynamics and no collision response. The detour task only checks whether
the effector entered the obstacle footprint.

Tasks:
    reach       move the effector to a goal point
    pick_place  carry one block to a goal spot
    detour      go around a central obstacle; the expert passes left or right
    stack       build a three-block tower on a goal spot
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

ACTION_DIM = 7
MAX_OBJECTS = 3
OBS_DIM = 6 + 1 + 4 * MAX_OBJECTS + 3
GRASP_RADIUS = 0.05
MAX_DELTA = 0.1
BLOCK_HEIGHT = 0.1
FOOTPRINT = 0.06
PLACE_TOL = 0.05
HOVER = 0.3
# expert approach cone (height per unit xy distance) and grip/release distance
APPROACH_SLOPE = 1.0
GRIP_TOL = 0.02
OBSTACLE_RADIUS = 0.2
DETOUR_OFFSET = 0.35
OBS_NOISE = 0.01
STACK_JITTER = 0.05
# three block slots, then the goal spot
STACK_SLOTS = np.array([[-0.4, -0.3], [0.0, -0.45], [0.4, -0.3], [0.0, 0.35]])
# observation entries that are positions and receive observation noise
_NOISY = np.array([True] * 6 + [False] + [True, True, True, False] * MAX_OBJECTS + [True] * 3)


class Task(IntEnum):
    REACH = 0
    PICK_PLACE = 1
    DETOUR = 2
    STACK = 3

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, str):
            try:
                return cls[value.upper().replace("-", "_")]
            except KeyError:
                raise ValueError(f"unknown task {value!r}") from None
        return cls(int(value))


NUM_TASKS = len(Task)
HORIZON = {Task.REACH: 40, Task.PICK_PLACE: 60, Task.DETOUR: 40, Task.STACK: 100}


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    goal: tuple[float, float, float]
    obstacle: tuple[float, float] | None = None
    mode_seed: int = 0

    @property
    def task_id(self) -> int:
        return int(self.task)

    def to_dict(self) -> dict:
        return {"task": self.task.name.lower(), "goal": list(self.goal),
                "obstacle": None if self.obstacle is None else list(self.obstacle),
                "mode_seed": self.mode_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(Task.parse(d["task"]), tuple(d["goal"]),
                   None if d.get("obstacle") is None else tuple(d["obstacle"]), int(d.get("mode_seed", 0)))


@dataclass(frozen=True)
class EnvState:
    ee_pose: np.ndarray
    gripper: int
    objects: tuple[np.ndarray, ...] = ()
    held: int = -1
    step_count: int = 0

    def object_pos(self, i: int) -> np.ndarray:
        return self.objects[i]

    def copy(self) -> "EnvState":
        return replace(self, ee_pose=self.ee_pose.copy(), objects=tuple(o.copy() for o in self.objects))


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    jerk: float
    failed: bool = False
    lateral_at_midpoint: float | None = None
    states: list = field(default_factory=list, repr=False)
    actions: list = field(default_factory=list, repr=False)


def _support_height(objects: Sequence[np.ndarray], idx: int, pos: np.ndarray) -> float:
    z = 0.0
    for j, o in enumerate(objects):
        if j != idx and np.hypot(*(o[:2] - pos[:2])) < FOOTPRINT and o[2] < pos[2] + 1e-9:
            z = max(z, o[2] + BLOCK_HEIGHT)
    return z


def step(state: EnvState, action) -> EnvState:
    """Apply one relative action; returns a new state and leaves ``state`` untouched."""
    a = np.asarray(action, dtype=np.float64)
    delta = np.clip(a[:6], -MAX_DELTA, MAX_DELTA)
    ee = state.ee_pose.copy()
    ee[:3] = np.clip(ee[:3] + delta[:3], -1.0, 1.0)
    ee[3:] = (ee[3:] + delta[3:] + math.pi) % (2 * math.pi) - math.pi
    grip = 1 if a[6] >= 0.5 else 0
    objects = [o.copy() for o in state.objects]
    held = state.held
    if held >= 0:
        objects[held] = ee[:3].copy()
    if grip == 1 and state.gripper == 0 and held < 0:
        best, best_d = -1, GRASP_RADIUS
        for i, o in enumerate(objects):
            d = float(np.linalg.norm(o - ee[:3]))
            if d < best_d:
                best, best_d = i, d
        if best >= 0:
            held = best
            objects[held] = ee[:3].copy()
    elif grip == 0 and held >= 0:
        pos = objects[held]
        pos[2] = _support_height(objects, held, pos)
        held = -1
    return EnvState(ee, grip, tuple(objects), held, state.step_count + 1)


def observe(state: EnvState, spec: TaskSpec) -> np.ndarray:
    obs = np.zeros(OBS_DIM)
    obs[:6] = state.ee_pose
    obs[6] = state.gripper
    slots = list(state.objects)
    if spec.task is Task.DETOUR and spec.obstacle is not None:
        slots = [np.array([spec.obstacle[0], spec.obstacle[1], 0.0])]
    for i, o in enumerate(slots[:MAX_OBJECTS]):
        obs[7 + 4 * i: 10 + 4 * i] = o
        obs[10 + 4 * i] = 1.0 if state.held == i else 0.0
    obs[-3:] = spec.goal
    return obs


def noisy_observation(obs: np.ndarray, rng: np.random.Generator, std: float = OBS_NOISE) -> np.ndarray:
    if std <= 0:
        return obs
    return obs + _NOISY * rng.normal(0.0, std, size=obs.shape)


def sample_scene(task, rng: np.random.Generator, mode_seed: int | None = None) -> tuple[TaskSpec, EnvState]:
    task = Task.parse(task)
    mode = int(rng.integers(0, 2)) if mode_seed is None else int(mode_seed)
    if task is Task.REACH:
        ee = np.r_[rng.uniform(-0.5, 0.5, 2), rng.uniform(0.1, 0.5), np.zeros(3)]
        goal = np.r_[rng.uniform(-0.5, 0.5, 2), rng.uniform(0.1, 0.5)]
        return TaskSpec(task, tuple(goal), mode_seed=mode), EnvState(ee, 0)
    if task is Task.DETOUR:
        ee = np.array([rng.uniform(-0.05, 0.05), -0.6, 0.2, 0, 0, 0])
        spec = TaskSpec(task, (0.0, 0.6, 0.2), obstacle=(0.0, 0.0), mode_seed=mode)
        return spec, EnvState(ee, 0)
    if task is Task.STACK:
        # jittered fixed slots: a desk-scale model can learn this within minutes
        jit = rng.uniform(-STACK_JITTER, STACK_JITTER, size=(5, 2))
        pts = STACK_SLOTS + jit[:4]
        ee = np.r_[jit[4], HOVER, np.zeros(3)]
        objects = tuple(np.r_[p, 0.0] for p in pts[:3])
        return TaskSpec(task, (float(pts[3, 0]), float(pts[3, 1]), 0.0), mode_seed=mode), EnvState(ee, 0, objects)
    n = 1
    ee = np.r_[rng.uniform(-0.3, 0.3, 2), HOVER, np.zeros(3)]
    while True:
        pts = rng.uniform(-0.5, 0.5, size=(n + 1, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(n + 1)
        if d.min() > 0.25:
            break
    objects = tuple(np.r_[p, 0.0] for p in pts[:n])
    goal = (float(pts[n, 0]), float(pts[n, 1]), 0.0)
    return TaskSpec(task, goal, mode_seed=mode), EnvState(ee, 0, objects)


# -- success / failure -------------------------------------------------------

def collided(spec: TaskSpec, state: EnvState) -> bool:
    if spec.task is not Task.DETOUR or spec.obstacle is None:
        return False
    return math.hypot(state.ee_pose[0] - spec.obstacle[0], state.ee_pose[1] - spec.obstacle[1]) < OBSTACLE_RADIUS


def block_on_goal(spec: TaskSpec, state: EnvState, i: int) -> bool:
    """Block ``i`` rests at level i of the tower (level 0 on the goal spot)."""
    if state.held == i:
        return False
    o = state.objects[i]
    below = np.asarray(spec.goal[:2]) if i == 0 else state.objects[i - 1][:2]
    if i > 0 and not block_on_goal(spec, state, i - 1):
        return False
    return bool(np.hypot(*(o[:2] - below)) < PLACE_TOL and abs(o[2] - BLOCK_HEIGHT * i) < 1e-6)


def is_success(spec: TaskSpec, state: EnvState) -> bool:
    if spec.task in (Task.REACH, Task.DETOUR):
        return bool(np.linalg.norm(state.ee_pose[:3] - np.asarray(spec.goal)) < PLACE_TOL)
    if spec.task is Task.PICK_PLACE:
        return block_on_goal(spec, state, 0)
    return all(block_on_goal(spec, state, i) for i in range(MAX_OBJECTS))


# -- scripted experts --------------------------------------------------------

def _move_toward(ee: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = target - ee[:3]
    m = float(np.max(np.abs(d)))
    return d if m <= MAX_DELTA else d * (MAX_DELTA / m)


def _action(delta: np.ndarray, grip: int) -> np.ndarray:
    out = np.zeros(ACTION_DIM)
    out[:3] = delta
    out[6] = grip
    return out


def _funnel(ee: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Step toward ``target`` through a cone: allowed height above it shrinks with xy distance."""
    dxy = float(np.hypot(*(ee[:2] - target[:2])))
    z = target[2] + min(HOVER - target[2], APPROACH_SLOPE * dxy)
    return _move_toward(ee, np.r_[target[:2], max(z, target[2])])


def _pick_and_place(ee: np.ndarray, state: EnvState, i: int, dest_xy: np.ndarray, dest_z: float) -> np.ndarray:
    if state.held == i:
        dest = np.r_[dest_xy, dest_z]
        if np.linalg.norm(ee[:3] - dest) <= GRIP_TOL:
            return _action(np.zeros(3), 0)
        return _action(_funnel(ee, dest), 1)
    pos = state.objects[i]
    if np.linalg.norm(ee[:3] - pos) <= GRIP_TOL:
        return _action(np.zeros(3), 1)
    return _action(_funnel(ee, pos), 0)


class UnsolvableState(RuntimeError):
    pass


def scripted_expert(spec: TaskSpec, state: EnvState, mode_seed: int | None = None) -> np.ndarray:
    """Deterministic expert action for (task, state, mode).

    For the detour task an even ``mode_seed`` passes on the left (x < 0), odd on the right.
    """
    mode = spec.mode_seed if mode_seed is None else mode_seed
    ee = state.ee_pose
    if spec.task is Task.REACH:
        return _action(_move_toward(ee, np.asarray(spec.goal)), 0)
    if spec.task is Task.DETOUR:
        side = 1.0 if mode % 2 else -1.0
        ox, oy = spec.obstacle
        waypoint = np.array([ox + side * DETOUR_OFFSET, oy, spec.goal[2]])
        if ee[1] < oy - 1e-6:
            return _action(_move_toward(ee, waypoint), 0)
        return _action(_move_toward(ee, np.asarray(spec.goal)), 0)
    dest = np.asarray(spec.goal[:2])
    n = 1 if spec.task is Task.PICK_PLACE else MAX_OBJECTS
    if state.held >= 0 and state.held >= n:
        raise UnsolvableState("holding an object the task never uses")
    for i in range(n):
        if block_on_goal(spec, state, i):
            continue
        if state.held >= 0 and state.held != i:
            raise UnsolvableState(f"holding block {state.held} while block {i} is unplaced")
        dest_xy = dest if i == 0 else state.objects[i - 1][:2]
        return _pick_and_place(ee, state, i, dest_xy, BLOCK_HEIGHT * i)
    return _action(np.zeros(3), state.gripper)


# -- rollouts ----------------------------------------------------------------

def jerk(translations: Sequence[np.ndarray]) -> float:
    """Mean L2 norm of second differences of the executed translation deltas."""
    tr = np.asarray(translations, dtype=np.float64)
    if len(tr) < 3:
        return 0.0
    return float(np.linalg.norm(tr[2:] - 2 * tr[1:-1] + tr[:-2], axis=1).mean())


def episode_seed(seed: int, task, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(Task.parse(task)), int(index)])


class Policy:
    """Batched policy interface used by :func:`evaluate`.

    ``reset`` receives the episode specs; ``act`` gets noisy observations of the
    still-running episodes (``indices`` into the reset batch) and returns
    physical actions, one row per index. ``states`` holds the matching clean
    simulator states; learned policies must ignore it.
    """

    def reset(self, specs: Sequence[TaskSpec], seeds: Sequence[int]) -> None:
        pass

    def act(self, obs: np.ndarray, indices: np.ndarray, t: int,
            states: Sequence[EnvState] = ()) -> np.ndarray:
        raise NotImplementedError


class ExpertPolicy(Policy):
    def reset(self, specs, seeds):
        self.specs = list(specs)

    def act(self, obs, indices, t, states=()):
        return np.stack([scripted_expert(self.specs[i], s) for i, s in zip(indices, states)])


class RandomPolicy(Policy):
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def act(self, obs, indices, t, states=()):
        a = self.rng.uniform(-MAX_DELTA, MAX_DELTA, size=(len(indices), ACTION_DIM))
        a[:, 3:6] = 0.0
        a[:, 6] = self.rng.integers(0, 2, size=len(indices))
        return a


def _midpoint_lateral(spec: TaskSpec, prev: EnvState, cur: EnvState) -> float | None:
    if spec.task is not Task.DETOUR:
        return None
    oy = spec.obstacle[1]
    if prev.ee_pose[1] < oy <= cur.ee_pose[1]:
        y0, y1 = prev.ee_pose[1], cur.ee_pose[1]
        w = (oy - y0) / (y1 - y0)
        return float(prev.ee_pose[0] + w * (cur.ee_pose[0] - prev.ee_pose[0]))
    return None


def run_episodes(policy: Policy, task, num_episodes: int, seed: int, obs_noise: float = OBS_NOISE,
                 horizon: int | None = None, keep_states: bool = False,
                 mode_seeds: Sequence[int] | None = None) -> list[EpisodeResult]:
    """Roll out ``num_episodes`` seeded episodes in lockstep through ``policy``."""
    task = Task.parse(task)
    horizon = horizon or HORIZON[task]
    rngs = [episode_seed(seed, task, e) for e in range(num_episodes)]
    scenes = [sample_scene(task, rngs[e], None if mode_seeds is None else mode_seeds[e])
              for e in range(num_episodes)]
    specs = [s for s, _ in scenes]
    states = [st for _, st in scenes]
    policy.reset(specs, [int(r.integers(0, 2 ** 31)) for r in rngs])
    done = np.zeros(num_episodes, dtype=bool)
    results = [EpisodeResult(False, 0, 0.0) for _ in range(num_episodes)]
    translations: list[list[np.ndarray]] = [[] for _ in range(num_episodes)]
    if keep_states:
        for e in range(num_episodes):
            results[e].states.append(states[e])
    for t in range(horizon):
        idx = np.flatnonzero(~done)
        if not len(idx):
            break
        obs = np.stack([noisy_observation(observe(states[e], specs[e]), rngs[e], obs_noise) for e in idx])
        actions = np.asarray(policy.act(obs, idx, t, [states[e] for e in idx]), dtype=np.float64)
        for row, e in enumerate(idx):
            a = actions[row]
            new = step(states[e], a)
            mid = _midpoint_lateral(specs[e], states[e], new)
            if mid is not None and results[e].lateral_at_midpoint is None:
                results[e].lateral_at_midpoint = mid
            states[e] = new
            translations[e].append(np.clip(a[:3], -MAX_DELTA, MAX_DELTA))
            r = results[e]
            r.steps = t + 1
            if keep_states:
                r.states.append(new)
                r.actions.append(a.copy())
            if collided(specs[e], new):
                r.failed = True
                if r.lateral_at_midpoint is None:
                    r.lateral_at_midpoint = float(new.ee_pose[0])
                done[e] = True
            elif is_success(specs[e], new):
                r.success = True
                done[e] = True
    for e in range(num_episodes):
        results[e].jerk = jerk(translations[e])
    return results


def evaluate(policy: Policy, task, num_episodes: int, seed: int, obs_noise: float = OBS_NOISE,
             horizon: int | None = None) -> dict:
    """Success rate (percent), its binomial standard error, and mean jerk."""
    results = run_episodes(policy, task, num_episodes, seed, obs_noise, horizon)
    succ = np.array([r.success for r in results], dtype=np.float64)
    p = float(succ.mean()) if len(succ) else 0.0
    return {
        "task": Task.parse(task).name.lower(),
        "episodes": num_episodes,
        "success_rate": 100.0 * p,
        "stderr": 100.0 * math.sqrt(p * (1 - p) / max(len(succ), 1)),
        "mean_jerk": float(np.mean([r.jerk for r in results])) if results else 0.0,
        "mean_steps": float(np.mean([r.steps for r in results])) if results else 0.0,
    }


def write_trace_csv(path, states: Sequence[EnvState], actions: Sequence[np.ndarray]) -> None:
    """Columns: step, ee_pose(6), gripper, object positions (3 x xyz), action(7)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (["step"] + [f"ee_{k}" for k in ("x", "y", "z", "roll", "pitch", "yaw")] + ["gripper"]
              + [f"obj{i}_{c}" for i in range(MAX_OBJECTS) for c in "xyz"]
              + [f"a_{k}" for k in ("dx", "dy", "dz", "droll", "dpitch", "dyaw", "g")])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s, st in enumerate(states):
            objs = [float(v) for i in range(MAX_OBJECTS)
                    for v in (st.objects[i] if i < len(st.objects) else (np.nan,) * 3)]
            act = actions[s] if s < len(actions) else np.full(ACTION_DIM, np.nan)
            w.writerow([s, *map(float, st.ee_pose), st.gripper, *objs, *map(float, act)])

