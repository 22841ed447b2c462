import csv
import json
import math

import numpy as np
import pytest

from diffact import cli, data
from diffact import simulator as sim
from diffact.training import LR_FLOOR, TrainConfig, Trainer
from diffact.errors import ConfigurationError

TINY = {"num_layers": 1, "embed_dim": 32, "num_heads": 2}


def labels_are_expert_actions(ep) -> bool:
    """Rebuild each state from its stored observation; the label must be the clean expert action."""
    n = {sim.Task.PICK_PLACE: 1, sim.Task.STACK: 3}.get(ep.task.task, 0)
    for obs, a in zip(ep.observations, ep.actions):
        objects = tuple(obs[7 + 4 * i: 10 + 4 * i].copy() for i in range(n))
        held = next((i for i in range(n) if obs[10 + 4 * i] == 1.0), -1)
        state = sim.EnvState(obs[:6].copy(), int(obs[6]), objects, held)
        if not np.array_equal(sim.scripted_expert(ep.task, state), a):
            return False
    return True


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert cli.main(["generate", "--episodes", "12", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tmp_path_factory.mktemp("cfg") / "train.json"
    cfg.write_text(json.dumps({"train": {"model_overrides": TINY, "batch_size": 8, "draws": 2}}))
    code = cli.main(["train", "--config", str(cfg), "--data", str(dataset), "--future-steps", "3",
                     "--steps", "5", "--seed", "0", "--out", str(out)])
    assert code == 0
    return out / cli.CHECKPOINT_NAME


def test_generate_counts_and_success(dataset):
    manifest = data.read_manifest(dataset)
    assert manifest["task_counts"] == {"detour": 3, "pick_place": 3, "reach": 3, "stack": 3}
    episodes, _ = data.read_dataset(dataset)
    for ep in episodes:
        assert labels_are_expert_actions(ep)


def test_generate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["generate", "--episodes", "8", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b


def test_train_outputs(checkpoint):
    run = checkpoint.parent
    rows = list(csv.DictReader((run / "loss.csv").open()))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4, 5]
    report = json.loads((run / "train_report.json").read_text())
    assert report["context_length"] == 5
    assert report["config"]["future_steps"] == 3 and report["build"]


def test_eval_report(checkpoint, tmp_path):
    args = ["eval", "--checkpoint", str(checkpoint), "--strategy", "adaptive,chunk", "--tasks", "reach",
            "--episodes", "3", "--seed", "1,2", "--ddim-steps", "2", "--out"]
    assert cli.main(args + [str(tmp_path / "a")]) == 0
    assert cli.main(args + [str(tmp_path / "b")]) == 0
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    assert ra["results"] == rb["results"]
    assert set(ra["results"]) == {"adaptive", "chunk"}
    for res in ra["results"].values():
        assert 0.0 <= res["overall"]["success_rate"] <= 100.0
        assert set(res["per_task"]) == {"reach"}
    assert ra["config"]["seeds"] == [1, 2]


@pytest.mark.parametrize("sweep,values,rows", [("strategy", None, 3), ("cfg-scale", None, 3)])
def test_ablate_rows(checkpoint, tmp_path, sweep, values, rows):
    code = cli.main(["ablate", "--sweep", sweep, "--checkpoint", str(checkpoint), "--tasks", "reach",
                     "--episodes", "2", "--ddim-steps", "2", "--out", str(tmp_path)])
    assert code == 0
    table = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    assert len(table) == rows
    for r in table:
        assert math.isfinite(float(r["success_mean"])) and float(r["success_stderr"]) >= 0


def test_ablate_future_steps_rows(dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"model_overrides": TINY, "batch_size": 4, "draws": 1, "steps": 1}}))
    code = cli.main(["ablate", "--sweep", "future-steps", "--config", str(cfg), "--data", str(dataset),
                     "--tasks", "reach", "--episodes", "2", "--ddim-steps", "1", "--out", str(tmp_path / "o")])
    assert code == 0
    table = list(csv.DictReader((tmp_path / "o" / "ablation.csv").open()))
    assert [r["variant"] for r in table] == ["0", "3", "7", "15"]


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--preset", "dit-huge"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    assert cli.main(["eval", "--out", str(tmp_path)]) == 1  # no checkpoint
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeds": []}))
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 1
    bad.write_text(json.dumps({"colour": "red"}))
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_preset_mismatch_is_usage_error(checkpoint, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(checkpoint), "--preset", "mlp3", "--out", str(tmp_path)]) == 1


def test_runtime_errors_exit_two(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 2
    junk = tmp_path / "junk.dact"
    junk.write_bytes(b"not a checkpoint")
    assert cli.main(["eval", "--checkpoint", str(junk), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"model_overrides": TINY, "batch_size": 4, "lr": 1e30}}))
    code = cli.main(["train", "--config", str(cfg), "--data", str(dataset), "--future-steps", "0",
                     "--steps", "30", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "TrainingError" in capsys.readouterr().err


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"episodes": 9, "seed": 3, "cfg_scale": 3.0}))
    args = cli.build_parser().parse_args(["eval", "--config", str(cfg), "--episodes", "4"])
    rc = cli.resolve_config(args)
    assert (rc.episodes, rc.seeds, rc.cfg_scale) == (4, [3], 3.0)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("DIFFACT_THREADS", "1")
    assert cli.worker_count() == 1


def test_resume_is_bitwise(dataset):
    episodes, _ = data.read_dataset(dataset)
    stats = data.compute_stats(episodes)
    cfg = TrainConfig(horizon=3, steps=4, batch_size=4, draws=2, model_overrides=TINY, lr=1e-3)
    straight = Trainer(cfg, episodes, stats)
    straight.fit(4)
    first = Trainer(cfg, episodes, stats)
    first.fit(2)
    path = dataset.parent / "resume.dact"
    first.save(path)
    resumed = Trainer(cfg, episodes, stats)
    resumed.load(path)
    resumed.fit(2)
    assert resumed.history[-1][1] == straight.history[-1][1]
    for n in straight.params:
        assert straight.params[n].data.tobytes() == resumed.params[n].data.tobytes()


def test_short_training_descends(dataset):
    episodes, _ = data.read_dataset(dataset)
    stats = data.compute_stats(episodes)
    cfg = TrainConfig(horizon=3, batch_size=16, draws=4, model_overrides=TINY, lr=1e-3, seed=1)
    hist = Trainer(cfg, episodes, stats).fit(200)
    losses = np.array([v for _, v in hist])
    assert losses[-20:].mean() < losses[:20].mean()


def test_context_length_n0(dataset):
    episodes, _ = data.read_dataset(dataset)
    t = Trainer(TrainConfig(horizon=0, model_overrides=TINY), episodes, data.compute_stats(episodes))
    assert t.context_length == 2 == t.model.config.context_length


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(steps=100, lr=1e-3, lr_schedule="cosine")
    assert cfg.lr_at(0) == pytest.approx(1e-3)
    assert cfg.lr_at(50) == pytest.approx(1e-3 * (LR_FLOOR + (1 - LR_FLOOR) / 2))
    assert cfg.lr_at(100) == pytest.approx(1e-3 * LR_FLOOR)
    assert all(cfg.lr_at(i) >= cfg.lr_at(i + 1) for i in range(100))
    assert TrainConfig(lr=2e-4).lr_at(77) == 2e-4
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_schedule="linear")
