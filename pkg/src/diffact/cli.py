"""``diffact`` command line: generate, train, eval, ablate.

Every command reads an optional JSON config (``--config``); explicit flags win.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import action_model as am
from . import data
from . import simulator as sim
from .diffusion import SamplerConfig
from .ensemble import Strategy, StrategyConfig, window_size
from .errors import ConfigurationError, DiffActError
from .policy import DiffusionPolicy
from .training import TrainConfig, Trainer, load_policy_parts, write_loss_csv

log = logging.getLogger("diffact")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.dact"
SWEEPS = ("strategy", "future-steps", "cfg-scale", "preset")
DEFAULT_SWEEP_VALUES = {
    "strategy": ["chunk", "temporal", "adaptive"],
    "future-steps": [0, 3, 7, 15],
    "cfg-scale": [1.0, 1.5, 3.0],
    "preset": ["dit-tiny", "mlp3"],
}


class UsageError(DiffActError):
    pass


@dataclass
class RunConfig:
    preset: str = "dit-tiny"
    future_steps: int = 15
    strategy: list[str] = field(default_factory=lambda: ["adaptive"])
    cfg_scale: float = 1.5
    ddim_steps: int = 10
    seeds: list[int] = field(default_factory=lambda: [0])
    episodes: int = 100
    tasks: list[str] = field(default_factory=lambda: ["reach", "pick_place", "detour", "stack"])
    out: str = "runs"
    data: str | None = None
    checkpoint: str | None = None
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in am.PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {sorted(am.PRESETS)}")
        if not self.seeds:
            raise ConfigurationError("seed list must not be empty")
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")
        if self.future_steps < 0:
            raise ConfigurationError("future steps must be >= 0")
        for s in self.strategy:
            Strategy(s)
        for t in self.tasks:
            sim.Task.parse(t)
        SamplerConfig(num_ddim_steps=self.ddim_steps, cfg_scale=self.cfg_scale)

    def sampler(self, **kw) -> SamplerConfig:
        return SamplerConfig(num_ddim_steps=self.ddim_steps, cfg_scale=self.cfg_scale, **kw)

    def train_config(self, seed: int, **kw) -> TrainConfig:
        d = dict(self.train)
        d.update(preset=self.preset, horizon=self.future_steps, seed=seed, **kw)
        return TrainConfig.from_dict(d)


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with defaults for any flag")
    common.add_argument("--seed", type=_int_list, dest="seeds", help="seed or comma-separated seeds")
    common.add_argument("--preset", choices=sorted(am.PRESETS))
    common.add_argument("--strategy", type=_str_list, help="chunk, temporal, adaptive or raw; comma list")
    common.add_argument("--future-steps", type=int, dest="future_steps")
    common.add_argument("--cfg-scale", type=float, dest="cfg_scale")
    common.add_argument("--ddim-steps", type=int, dest="ddim_steps")
    common.add_argument("--episodes", type=int)
    common.add_argument("--tasks", type=_str_list, help="comma-separated task names")
    common.add_argument("--out", type=str)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="diffact", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"diffact {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="write expert demonstrations to --out")

    t = sub.add_parser("train", parents=[common], help="train a policy on a generated dataset")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=["constant", "cosine"], dest="lr_schedule")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--objective", choices=["diffusion", "regression"])
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="roll out a checkpoint in the simulator")
    e.add_argument("--checkpoint", help="policy checkpoint")

    a = sub.add_parser("ablate", parents=[common], help="compare variants over seeds")
    a.add_argument("--sweep", choices=SWEEPS, required=True)
    a.add_argument("--values", type=_str_list, help="variant values (defaults per sweep)")
    a.add_argument("--checkpoint", help="checkpoint for strategy / cfg-scale sweeps")
    a.add_argument("--data", help="dataset for sweeps that train one model per variant")
    a.add_argument("--steps", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--lr-schedule", choices=["constant", "cosine"], dest="lr_schedule")
    a.add_argument("--batch-size", type=int, dest="batch_size")
    return p


FLAG_KEYS = ("preset", "future_steps", "strategy", "cfg_scale", "ddim_steps", "seeds", "episodes", "tasks",
             "out", "data", "checkpoint")
TRAIN_FLAG_KEYS = ("steps", "lr", "lr_schedule", "batch_size", "objective")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config is not None:
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError("config file must hold a JSON object")
    if "seed" in base and "seeds" not in base:
        base["seeds"] = base.pop("seed")
    for key in ("seeds", "strategy", "tasks"):
        if key in base and not isinstance(base[key], list):
            base[key] = [base[key]]
    unknown = set(base) - {f for f in RunConfig.__dataclass_fields__}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key in FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    train = dict(base.get("train", {}))
    for key in TRAIN_FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            train[key] = val
    base["train"] = train
    try:
        return RunConfig(**base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def worker_count() -> int:
    cap = os.environ.get("DIFFACT_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"DIFFACT_THREADS must be an integer, got {cap!r}") from None
    return n


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report(cfg: RunConfig, command: str, **body) -> dict:
    return {"command": command, "build": build_id(), "config": asdict(cfg), **body}


# -- evaluation jobs -----------------------------------------------------------

def _eval_job(job: dict) -> dict:
    strat = StrategyConfig(strategy=job["strategy"], window=job["window"])
    policy = DiffusionPolicy.from_checkpoint(job["checkpoint"], sampler=SamplerConfig(**job["sampler"]),
                                             strategy=strat)
    res = sim.evaluate(policy, job["task"], job["episodes"], job["seed"])
    res.update(strategy=job["strategy"], seed=job["seed"], model_calls=policy.model_calls)
    return res


def run_jobs(jobs: list[dict]) -> list[dict]:
    """Run evaluation jobs, in a process pool when more than one worker is allowed."""
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [_eval_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_eval_job, jobs))  # map keeps submission order


def eval_jobs(checkpoint: str, cfg: RunConfig, strategies, seeds, sampler: SamplerConfig) -> list[dict]:
    _, _, stats, train, _ = load_policy_parts(checkpoint)
    if train.objective == "regression" or sampler.cfg_scale == 1.0:
        sampler = replace(sampler, cfg_scale=1.0)
    k = window_size(stats.step_std)
    return [{"checkpoint": str(checkpoint), "strategy": s, "window": k, "task": t, "episodes": cfg.episodes,
             "seed": seed, "sampler": asdict(sampler)}
            for s in strategies for t in cfg.tasks for seed in seeds]


def summarize(rows: list[dict]) -> dict:
    """Mean and standard error of the success rate over seeds (binomial if only one)."""
    rates = np.array([r["success_rate"] for r in rows], dtype=np.float64)
    if len(rates) > 1:
        stderr = float(rates.std(ddof=1) / math.sqrt(len(rates)))
    else:
        stderr = float(rows[0]["stderr"])
    return {"success_rate": float(rates.mean()), "stderr": stderr,
            "mean_jerk": float(np.mean([r["mean_jerk"] for r in rows])), "seeds": len(rows)}


# -- commands -------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> dict:
    n_tasks = len(cfg.tasks)
    counts = {t: cfg.episodes // n_tasks + (1 if i < cfg.episodes % n_tasks else 0)
              for i, t in enumerate(cfg.tasks)}
    out = Path(cfg.out)
    seed = cfg.seeds[0]
    episodes = data.generate(counts, seed)
    manifest = data.write_dataset(out, episodes, seed=seed, extra={"build": build_id()})
    log.info("wrote %d episodes to %s", len(episodes), out)
    return manifest


def _load_data(cfg: RunConfig):
    if not cfg.data:
        raise UsageError("--data is required")
    episodes, manifest = data.read_dataset(cfg.data)
    tc = cfg.train_config(cfg.seeds[0])
    stats = data.compute_stats(episodes, mode=tc.norm_mode)
    return episodes, stats


def train_one(cfg: RunConfig, episodes, stats, seed: int, out: Path, resume: Path | None = None,
              **overrides) -> Path:
    tc = cfg.train_config(seed, **overrides)
    trainer = Trainer(tc, episodes, stats)
    if resume is not None:
        trainer.load(resume)
    log.info("training %s N=%d seed=%d context=%d for %d steps", tc.preset, tc.horizon, seed,
             trainer.context_length, tc.steps - trainer.step)
    trainer.fit(max(tc.steps - trainer.step, 0))
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(out / CHECKPOINT_NAME)
    write_loss_csv(out / "loss.csv", trainer.history)
    _write_json(out / "train_report.json",
                _report(cfg, "train", seed=seed, steps=trainer.step, context_length=trainer.context_length,
                        final_loss=trainer.history[-1][1] if trainer.history else None,
                        train=tc.to_dict(), checkpoint=str(out / CHECKPOINT_NAME)))
    return out / CHECKPOINT_NAME


def cmd_train(cfg: RunConfig, resume: Path | None = None) -> dict:
    episodes, stats = _load_data(cfg)
    out = Path(cfg.out)
    paths = []
    for seed in cfg.seeds:
        target = out if len(cfg.seeds) == 1 else out / f"seed-{seed}"
        paths.append(str(train_one(cfg, episodes, stats, seed, target, resume)))
    return {"checkpoints": paths}


def _check_preset(cfg: RunConfig, checkpoint: str, explicit: bool) -> None:
    _, _, _, train, _ = load_policy_parts(checkpoint)
    if explicit and train.preset != cfg.preset:
        raise UsageError(f"--preset {cfg.preset} does not match checkpoint preset {train.preset}")


def cmd_eval(cfg: RunConfig, preset_given: bool = False) -> dict:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    _check_preset(cfg, cfg.checkpoint, preset_given)
    rows = run_jobs(eval_jobs(cfg.checkpoint, cfg, cfg.strategy, cfg.seeds, cfg.sampler()))
    results = {}
    for s in cfg.strategy:
        mine = [r for r in rows if r["strategy"] == s]
        per_task = {t: summarize([r for r in mine if r["task"] == t]) for t in cfg.tasks}
        results[s] = {"overall": summarize(mine), "per_task": per_task, "runs": mine}
    report = _report(cfg, "eval", checkpoint=cfg.checkpoint, results=results)
    _write_json(Path(cfg.out) / "report.json", report)
    return report


def cmd_ablate(cfg: RunConfig, sweep: str, values: list[str] | None) -> dict:
    values = values or [str(v) for v in DEFAULT_SWEEP_VALUES[sweep]]
    out = Path(cfg.out)
    rows = []
    if sweep in ("strategy", "cfg-scale"):
        if not cfg.checkpoint:
            raise UsageError(f"--checkpoint is required for a {sweep} sweep")
        for v in values:
            if sweep == "strategy":
                jobs = eval_jobs(cfg.checkpoint, cfg, [v], cfg.seeds, cfg.sampler())
            else:
                jobs = eval_jobs(cfg.checkpoint, cfg, cfg.strategy[:1], cfg.seeds,
                                 replace(cfg.sampler(), cfg_scale=float(v)))
            rows.append((v, run_jobs(jobs)))
    else:
        episodes, stats = _load_data(cfg)
        for v in values:
            variant = replace(cfg, future_steps=int(v)) if sweep == "future-steps" else replace(cfg, preset=v)
            results = []
            for seed in cfg.seeds:
                ckpt = train_one(variant, episodes, stats, seed, out / f"{sweep}-{v}" / f"seed-{seed}")
                results += run_jobs(eval_jobs(str(ckpt), variant, cfg.strategy[:1], [seed], variant.sampler()))
            rows.append((v, results))
    table = [{"variant": v, **summarize(r)} for v, r in rows]
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "variant", "success_mean", "success_stderr", "mean_jerk", "seeds"])
        for r in table:
            w.writerow([sweep, r["variant"], f"{r['success_rate']:.4f}", f"{r['stderr']:.4f}",
                        f"{r['mean_jerk']:.6f}", r["seeds"]])
    report = _report(cfg, "ablate", sweep=sweep, rows=table)
    _write_json(out / "ablation.json", report)
    return report


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            result = cmd_generate(cfg)
        elif args.command == "train":
            result = cmd_train(cfg, args.resume)
        elif args.command == "eval":
            result = cmd_eval(cfg, preset_given=args.preset is not None)
        else:
            result = cmd_ablate(cfg, args.sweep, args.values)
    except (UsageError, ConfigurationError) as exc:
        print(f"diffact: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DiffActError, OSError, RuntimeError) as exc:
        print(f"diffact: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    json.dump(result, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
