"""Experiment commands behind the CLI: train, sweep, compose, eval.

Config files are JSON with a ``version`` field.  A train config looks like::

    {"version": 1, "task": "path/to/task_dir", "train": {"gamma": 0.001, "seed": 3}}

``task`` is resolved relative to the config file.  A sweep config adds
``"sweep": {"gamma_values": [...], "seeds": [...], "steps_values": [...]}``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import evaluate
from .model import FrozenModel
from .tensor import Tensor
from .tasks import Task, TaskLoadError, TaskSpec, gen_task, load_task, read_groundtruth
from .train import ConfigValidationError, TrainConfig, train
from .transport import (
    TransportStack,
    apply,
    compose,
    identity_stack,
    load_stack,
    save_stack,
    support,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
CHECKPOINT_FILE = "checkpoint.json"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
SUMMARY_FILE = "summary.json"
TIMING_FILE = "timing.json"


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def _read_json(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigValidationError(f"{what}: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"{what}: malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigValidationError(f"{what}: expected a JSON object")
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigValidationError(f"version: unsupported config version {doc.get('version')!r}")
    return doc


@dataclass
class RunConfig:
    task_dir: Path
    task_ref: str
    train: TrainConfig

    def resolved(self) -> dict:
        return {"version": CONFIG_VERSION, "task": self.task_ref, "train": self.train.to_dict()}


def load_run_config(path) -> RunConfig:
    doc = _read_json(path, "config")
    task_ref = doc.get("task")
    if not isinstance(task_ref, str):
        raise ConfigValidationError("task: expected a path to a task directory")
    return RunConfig(Path(path).parent / task_ref, task_ref, TrainConfig.from_dict(doc.get("train", {})))


def load_task_spec(path) -> TaskSpec:
    doc = _read_json(path, "task config")
    return TaskSpec.from_dict(doc.get("task", {}))


# --- scoring against the sealed ground truth ------------------------------

def planted_scores(stack: TransportStack, groundtruth: dict) -> dict:
    hook = groundtruth.get("hook_index")
    s = support(stack)
    if hook is None:
        return {"planted_hook": None, "planted_hook_support_frac": None, "planted_coord_recall": None}
    m = stack.maps[hook]
    moved = (m.omega != 1.0) | (m.bias != 0.0)
    coords = groundtruth["coords"]
    return {
        "planted_hook": hook,
        "planted_hook_support_frac": s.per_hook[hook] / s.total if s.total else None,
        "planted_coord_recall": float(np.mean(moved[coords])) if coords else None,
    }


def _try_groundtruth(task: Task) -> dict | None:
    try:
        return read_groundtruth(task)
    except (OSError, TaskLoadError):
        return None


# --- commands -------------------------------------------------------------

def cmd_gen_task(spec: TaskSpec, out_dir) -> Task:
    return gen_task(spec, out_dir)


def run_training(task: Task, config: TrainConfig, out_dir, resolved: dict) -> dict:
    """Train on ``task`` and write checkpoint, metrics and summary into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    stack, metrics = train(task.model, task.source_train, task.target_train, config)
    runtime = time.perf_counter() - t0

    save_stack(stack, out / CHECKPOINT_FILE, task.model.hash(), config.to_dict())
    n_hooks = len(task.model.hooks)
    metrics.write_csv(out / METRICS_CSV, n_hooks)
    metrics.write_json(out / METRICS_JSON)

    held = evaluate(stack, task.model, task.source_heldout, task.target_heldout, gamma=config.gamma)
    s = support(stack)
    summary = {
        "config": resolved,
        "model_hash": task.model.hash(),
        "steps_completed": len(metrics.records),
        "final_train_batch_cost": metrics.records[-1].total_cost,
        "support": s.total,
        "support_per_hook": list(s.per_hook),
        "support_literal_sum": s.literal_sum,
        "heldout": held.to_dict(),
    }
    (out / SUMMARY_FILE).write_text(_dump(summary))
    timing = {"runtime_seconds": runtime, "step_wall_times": [r.wall_time for r in metrics.records]}
    (out / TIMING_FILE).write_text(_dump(timing))
    return summary


def cmd_train(config_path, out_dir, overrides: dict | None = None) -> dict:
    rc = load_run_config(config_path)
    if overrides:
        rc.train = replace(rc.train, **overrides)
    task = load_task(rc.task_dir)
    return run_training(task, rc.train, out_dir, rc.resolved())


@dataclass(frozen=True)
class SweepSpec:
    gamma_values: tuple[float, ...]
    seeds: tuple[int, ...]
    steps_values: tuple[int, ...]

    @classmethod
    def from_dict(cls, doc, base: TrainConfig, path: str = "sweep") -> SweepSpec:
        if not isinstance(doc, dict):
            raise ConfigValidationError(f"{path}: expected an object")
        gammas = doc.get("gamma_values", [base.gamma])
        seeds = doc.get("seeds", [base.seed])
        steps = doc.get("steps_values", [base.steps])
        for name, vals in (("gamma_values", gammas), ("seeds", seeds), ("steps_values", steps)):
            if not isinstance(vals, list) or not vals:
                raise ConfigValidationError(f"{path}.{name}: must be a non-empty list")
        return cls(tuple(float(g) for g in gammas), tuple(int(s) for s in seeds), tuple(int(n) for n in steps))

    def cells(self):
        for steps in self.steps_values:
            for gamma in self.gamma_values:
                for seed in self.seeds:
                    yield gamma, seed, steps


def cmd_sweep(config_path, out_dir) -> list[dict]:
    """Train one cell per (gamma, seed, steps) and write ``sweep.csv``.

    A failing cell is recorded with its error and the sweep moves on.
    """
    doc = _read_json(config_path, "sweep config")
    rc = load_run_config(config_path)
    sweep = SweepSpec.from_dict(doc.get("sweep"), rc.train)
    task = load_task(rc.task_dir)
    n_hooks = len(task.model.hooks)
    out = Path(out_dir)
    rows = []
    for gamma, seed, steps in sweep.cells():
        cell_dir = out / "cells" / f"gamma={gamma!r}_seed={seed}_steps={steps}"
        row = {"gamma": gamma, "seed": seed, "steps": steps}
        try:
            cfg = replace(rc.train, gamma=gamma, seed=seed, steps=steps)
            resolved = {**rc.resolved(), "train": cfg.to_dict()}
            summary = run_training(task, cfg, cell_dir, resolved)
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.warning("sweep cell gamma=%r seed=%d steps=%d failed: %s", gamma, seed, steps, exc)
            row["status"] = f"error: {type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        row["status"] = "ok"
        row["support"] = summary["support"]
        row["support_literal_sum"] = summary["support_literal_sum"]
        for k, (c, d) in enumerate(zip(summary["support_per_hook"], task.model.hook_dims)):
            row[f"support_frac_l{k}"] = c / d
        row["heldout_total_cost"] = summary["heldout"]["total_cost"]
        for k, v in enumerate(summary["heldout"]["per_layer_delta"]):
            row[f"heldout_delta_l{k}"] = v
        rows.append(row)

    groundtruth = _try_groundtruth(task)
    if groundtruth is not None:
        for row in rows:
            if row["status"] != "ok":
                continue
            cell_dir = out / "cells" / f"gamma={row['gamma']!r}_seed={row['seed']}_steps={row['steps']}"
            stack = load_stack(cell_dir / CHECKPOINT_FILE)
            row.update(planted_scores(stack, groundtruth))

    header = ["gamma", "seed", "steps", "status", "support", "support_literal_sum"]
    header += [f"support_frac_l{k}" for k in range(n_hooks)]
    header += ["heldout_total_cost"] + [f"heldout_delta_l{k}" for k in range(n_hooks)]
    header += ["planted_hook", "planted_hook_support_frac", "planted_coord_recall"]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else ("" if v is None else v)) for k, v in row.items()})
    return rows


def run_chained(model: FrozenModel, stacks: list[TransportStack], x) -> list[np.ndarray]:
    """Model run applying each stack's map in turn at every hook; returns hook activations and output."""
    slot = {h: i for i, h in enumerate(model.hooks)}
    h = Tensor(x)
    out = []
    for i, block in enumerate(model.blocks):
        h = block(h)
        if i in slot:
            for s in stacks:
                h = apply(s.maps[slot[i]], h)
            out.append(h.data)
    out.append(h.data)
    return out


def cmd_compose(stack_a: TransportStack, stack_b: TransportStack, task_a: Task, task_b: Task | None = None) -> dict:
    """Score both composition orders and check them against chained application."""
    model = task_a.model
    if task_b is not None and task_b.model.hash() != model.hash():
        raise ConfigValidationError("task_b: both tasks must share the same model")
    targets = {"a": task_a}
    if task_b is not None:
        targets["b"] = task_b

    def scores(stack):
        res = {}
        for name, t in targets.items():
            res[f"heldout_vs_{name}"] = evaluate(stack, model, t.source_heldout, t.target_heldout).to_dict()
        return res

    report = {"singles": {"a": scores(stack_a), "b": scores(stack_b)}, "orders": {}}
    x = task_a.source_heldout
    worst = 0.0
    for name, first, second in (("a_then_b", stack_a, stack_b), ("b_then_a", stack_b, stack_a)):
        composed = compose(first, second)
        materialized = run_chained(model, [composed], x)
        chained = run_chained(model, [first, second], x)
        dev = max(float(np.max(np.abs(p - q))) for p, q in zip(materialized, chained))
        worst = max(worst, dev)
        report["orders"][name] = {**scores(composed), "max_abs_deviation_vs_chained": dev}
    ident = identity_stack(model.hook_dims)
    report["identity_neutral_exact"] = all(
        compose(s, ident).maps == s.maps and compose(ident, s).maps == s.maps for s in (stack_a, stack_b)
    )
    ab, ba = compose(stack_a, stack_b), compose(stack_b, stack_a)
    report["order_dependent"] = ab.maps != ba.maps
    report["max_abs_deviation_vs_chained"] = worst
    return report


def cmd_eval(stack: TransportStack, task: Task, strength: float = 1.0) -> dict:
    res = evaluate(stack, task.model, task.source_heldout, task.target_heldout, strength=strength)
    report = {"strength": strength, **res.to_dict()}
    groundtruth = _try_groundtruth(task)
    if groundtruth is not None:
        report.update(planted_scores(stack, groundtruth))
    return report
