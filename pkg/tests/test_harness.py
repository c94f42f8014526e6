import csv
import json
import logging

import numpy as np
import pytest

from affine_steer import harness
from affine_steer.cli import main
from affine_steer.model import forward_with_hooks
from affine_steer.tasks import PlantSpec, TaskLoadError, TaskSpec, gen_task, load_task, make_task, read_groundtruth
from affine_steer.train import ConfigValidationError, TrainConfig
from affine_steer.transport import AffineMap, TransportStack, identity_stack, load_stack, support

SMALL = dict(n_train=64, n_heldout=48, depth=3, widths=(6, 6, 6))


@pytest.fixture(scope="module")
def task_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("task")
    gen_task(TaskSpec(model_seed=2, data_seed=3, planted=PlantSpec(hook_index=1, support_size=2), **SMALL), d)
    return d


def _config(tmp_path, task_dir, train=None, sweep=None):
    doc = {"version": 1, "task": str(task_dir), "train": train if train is not None else {"gamma": 1e-3, "steps": 30}}
    if sweep is not None:
        doc["sweep"] = sweep
    p = tmp_path / "config.json"
    p.write_text(json.dumps(doc))
    return p


# --- tasks ----------------------------------------------------------------

def test_gen_task_deterministic(tmp_path):
    spec = TaskSpec(planted=PlantSpec(hook_index=0, support_size=3), **SMALL)
    gen_task(spec, tmp_path / "a")
    gen_task(spec, tmp_path / "b")
    for name in ("model.json", "data.json", "groundtruth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("planted", [None, PlantSpec(hook_index=1, support_size=0)])
def test_no_plant_means_matched_distributions(planted):
    task, truth = make_task(TaskSpec(planted=planted, **SMALL))
    _, clean = forward_with_hooks(task.model, None, task.source_train)
    for a, b in zip(clean.layers, task.target_train.layers):
        assert np.array_equal(a.data, b.data)
    assert truth["coords"] == []


def test_planted_map_shape():
    task, truth = make_task(TaskSpec(planted=PlantSpec(hook_index=1, support_size=3), **SMALL))
    assert len(truth["coords"]) == 3
    s = support(TransportStack(tuple(AffineMap(h["omega"], h["bias"]) for h in truth["stack"]["hooks"])))
    assert s.per_hook == (0, 3)


def test_task_roundtrip_and_sealed_truth(task_dir):
    task = load_task(task_dir)
    assert task.spec.planted.hook_index == 1
    truth = read_groundtruth(task)
    assert truth["hook_index"] == 1
    raw = (task_dir / "groundtruth.json").read_text()
    try:
        (task_dir / "groundtruth.json").write_text(raw.replace('"hook_index":1', '"hook_index":0'))
        with pytest.raises(TaskLoadError, match="hash"):
            read_groundtruth(task)
    finally:
        (task_dir / "groundtruth.json").write_text(raw)


def test_task_spec_validation():
    with pytest.raises(ConfigValidationError, match=r"task\.colour"):
        TaskSpec.from_dict({"colour": 1})
    with pytest.raises(ConfigValidationError, match=r"task\.planted\.support_size"):
        TaskSpec.from_dict({"planted": {"hook_index": 0}})


# --- train ----------------------------------------------------------------

def test_train_outputs_byte_identical(tmp_path, task_dir):
    cfg = _config(tmp_path, task_dir)
    s1 = harness.cmd_train(cfg, tmp_path / "r1")
    harness.cmd_train(cfg, tmp_path / "r2")
    for name in ("checkpoint.json", "metrics.csv", "metrics.json", "summary.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name
    assert "runtime_seconds" in json.loads((tmp_path / "r1" / "timing.json").read_text())
    stack = load_stack(tmp_path / "r1" / "checkpoint.json", load_task(task_dir).model)
    assert s1["support"] == support(stack, 0.0).total
    assert s1["steps_completed"] == 30


def test_train_defaults_and_missing_gamma(tmp_path, task_dir, caplog):
    cfg = _config(tmp_path, task_dir, train={"steps": 5})
    with caplog.at_level(logging.INFO, logger="affine_steer"):
        summary = harness.cmd_train(cfg, tmp_path / "out")
    assert "gamma not set" in caplog.text
    resolved = summary["config"]["train"]
    assert resolved == {**TrainConfig().to_dict(), "steps": 5}


def test_train_overrides(tmp_path, task_dir):
    summary = harness.cmd_train(_config(tmp_path, task_dir), tmp_path / "o", {"gamma": 10.0, "steps": 4})
    assert summary["support"] == 0
    assert summary["config"]["train"]["gamma"] == 10.0


def test_bad_config_version(tmp_path, task_dir):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"version": 2, "task": str(task_dir)}))
    with pytest.raises(ConfigValidationError, match="version"):
        harness.load_run_config(p)


# --- sweep ----------------------------------------------------------------

def test_sweep_grid_and_partial_failure(tmp_path, task_dir):
    cfg = _config(tmp_path, task_dir, sweep={"gamma_values": [0.0, 1e-3], "seeds": [0, 1], "steps_values": [0, 10]})
    rows = harness.cmd_sweep(cfg, tmp_path / "sw")
    assert len(rows) == 8
    bad = [r for r in rows if r["steps"] == 0]
    assert all(r["status"].startswith("error: ConfigValidationError") for r in bad)
    good = [r for r in rows if r["steps"] == 10]
    assert all(r["status"] == "ok" for r in good)
    assert all(r["planted_hook"] == 1 for r in good)
    with open(tmp_path / "sw" / "sweep.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 8
    assert {"support_frac_l0", "support_frac_l1", "planted_coord_recall", "heldout_total_cost"} <= set(table[0])
    assert (tmp_path / "sw" / "cells" / "gamma=0.001_seed=1_steps=10" / "checkpoint.json").exists()


def test_sweep_empty_grid_rejected(tmp_path, task_dir):
    cfg = _config(tmp_path, task_dir, sweep={"gamma_values": []})
    with pytest.raises(ConfigValidationError, match=r"sweep\.gamma_values"):
        harness.cmd_sweep(cfg, tmp_path / "sw")


# --- compose / eval -------------------------------------------------------

def _random_stack(model, seed):
    rng = np.random.default_rng(seed)
    return TransportStack(tuple(AffineMap(rng.uniform(0.5, 1.5, d), rng.normal(scale=0.3, size=d)) for d in model.hook_dims))


def test_compose_report(task_dir):
    task = load_task(task_dir)
    a, b = _random_stack(task.model, 0), _random_stack(task.model, 1)
    rep = harness.cmd_compose(a, b, task)
    assert set(rep["orders"]) == {"a_then_b", "b_then_a"}
    assert rep["max_abs_deviation_vs_chained"] < 1e-12
    assert rep["identity_neutral_exact"] is True
    assert rep["order_dependent"] is True
    ident = identity_stack(task.model.hook_dims)
    rep2 = harness.cmd_compose(a, ident, task, task)
    assert rep2["orders"]["a_then_b"]["heldout_vs_a"] == rep2["singles"]["a"]["heldout_vs_a"]
    assert "heldout_vs_b" in rep2["singles"]["b"]


def test_eval_strength(task_dir):
    task = load_task(task_dir)
    stack = _random_stack(task.model, 2)
    none = harness.cmd_eval(identity_stack(task.model.hook_dims), task, 1.0)
    at0 = harness.cmd_eval(stack, task, 0.0)
    assert at0["total_cost"] == none["total_cost"]
    full = harness.cmd_eval(stack, task, 1.0)
    from affine_steer.baselines import evaluate

    assert full["total_cost"] == evaluate(stack, task.model, task.source_heldout, task.target_heldout).loss.total_cost
    near = [harness.cmd_eval(stack, task, lam)["total_cost"] for lam in (0.5, 0.5 + 1e-7)]
    assert abs(near[0] - near[1]) < 1e-4
    assert full["planted_hook"] == 1


# --- CLI ------------------------------------------------------------------

def test_cli_end_to_end(tmp_path):
    t = tmp_path / "task"
    assert main(["gen-task", "--out", str(t), "--depth", "3", "--width", "5", "--n-train", "40",
                 "--n-heldout", "40", "--plant-hook", "0", "--plant-support", "2"]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "task": "task", "train": {"gamma": 0.001, "steps": 20}}))
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert main(["train", str(cfg), "--out", str(tmp_path / "r2"), "--seed", "4"]) == 0
    ck1, ck2 = tmp_path / "r" / "checkpoint.json", tmp_path / "r2" / "checkpoint.json"
    assert main(["eval", "--checkpoint", str(ck1), "--task", str(t), "--strength", "0.5", "--out", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["strength"] == 0.5
    assert main(["compose", "--a", str(ck1), "--b", str(ck2), "--task", str(t), "--out", str(tmp_path / "c.json")]) == 0
    assert json.loads((tmp_path / "c.json").read_text())["identity_neutral_exact"] is True


def test_cli_exit_codes(tmp_path, task_dir):
    cfg = _config(tmp_path, task_dir)
    assert main(["train", str(cfg), "--out", str(tmp_path / "r"), "--steps", "0"]) == 2
    assert main(["train", str(tmp_path / "missing.json"), "--out", str(tmp_path / "r")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.json"), "--task", str(task_dir)]) == 2
    # exploding learning rate
    with np.errstate(all="ignore"):
        assert main(["train", str(_config(tmp_path, task_dir, {"lr0": 1e200, "steps": 5})), "--out", str(tmp_path / "x")]) == 3
