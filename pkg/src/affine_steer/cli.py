"""Command-line entry point: ``affine-steer {gen-task,train,sweep,compose,eval}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .model import ConfigError, ModelLoadError
from .tasks import PlantSpec, TaskLoadError, TaskSpec, load_task
from .tensor import NumericalError, ShapeError, UsageError
from .train import ConfigValidationError
from .transport import CheckpointError, load_stack

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("affine_steer")


def _write_report(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=1, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _gen_task(args) -> int:
    spec = harness.load_task_spec(args.config) if args.config else TaskSpec()
    overrides = {}
    for flag, key in (("model_seed", "model_seed"), ("data_seed", "data_seed"), ("n_train", "n_train"),
                      ("n_heldout", "n_heldout"), ("depth", "depth"), ("nonlinearity", "nonlinearity"),
                      ("target_inputs", "target_inputs")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.width is not None:
        depth = overrides.get("depth", spec.depth)
        overrides["widths"] = tuple([args.width] * depth)
    elif "depth" in overrides and len(spec.widths) != overrides["depth"]:
        overrides["widths"] = tuple([spec.widths[0]] * overrides["depth"])
    if args.hooks is not None:
        overrides["hook_policy"] = tuple(int(h) for h in args.hooks.split(","))
    spec = replace(spec, **overrides)
    if args.plant_hook is not None:
        plant = PlantSpec(hook_index=args.plant_hook, support_size=args.plant_support, plant_seed=args.plant_seed)
        spec = replace(spec, planted=plant)
    spec.validate()
    task = harness.cmd_gen_task(spec, args.out)
    log.info("wrote task to %s (hooks %s, dims %s)", args.out, list(task.model.hooks), list(task.model.hook_dims))
    return 0


def _train(args) -> int:
    overrides = {k: v for k, v in (("gamma", args.gamma), ("seed", args.seed), ("steps", args.steps)) if v is not None}
    summary = harness.cmd_train(args.config, args.out, overrides)
    log.info("support %d, held-out total cost %.6g", summary["support"], summary["heldout"]["total_cost"])
    return 0


def _sweep(args) -> int:
    rows = harness.cmd_sweep(args.config, args.out)
    failed = sum(r["status"] != "ok" for r in rows)
    log.info("%d cells, %d failed; results in %s", len(rows), failed, Path(args.out) / "sweep.csv")
    return 0


def _compose(args) -> int:
    task_a = load_task(args.task)
    task_b = load_task(args.task_b) if args.task_b else None
    a = load_stack(args.a, task_a.model)
    b = load_stack(args.b, task_a.model)
    _write_report(harness.cmd_compose(a, b, task_a, task_b), args.out)
    return 0


def _eval(args) -> int:
    task = load_task(args.task)
    stack = load_stack(args.checkpoint, task.model)
    _write_report(harness.cmd_eval(stack, task, args.strength), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="affine-steer", description="Train and evaluate sparse affine activation interventions on synthetic frozen models.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-task", help="generate a synthetic task directory")
    g.add_argument("--config", help="task config JSON ({'version': 1, 'task': {...}})")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--model-seed", type=int)
    g.add_argument("--data-seed", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-heldout", type=int)
    g.add_argument("--depth", type=int, help="number of layers (hooks = depth - 1 by default)")
    g.add_argument("--width", type=int, help="width of every layer")
    g.add_argument("--nonlinearity", choices=("tanh", "gelu", "relu"))
    g.add_argument("--hooks", help="comma-separated block indices; overrides the after-layernorm policy")
    g.add_argument("--target-inputs", choices=("same", "fresh"))
    g.add_argument("--plant-hook", type=int, help="hook index of the planted map (default: none)")
    g.add_argument("--plant-support", type=int, default=4)
    g.add_argument("--plant-seed", type=int, default=0)
    g.set_defaults(func=_gen_task)

    t = sub.add_parser("train", help="train a transport stack")
    t.add_argument("config", help="train config JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--gamma", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=_train)

    s = sub.add_parser("sweep", help="grid of train runs over gamma x seed x steps")
    s.add_argument("config", help="sweep config JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_sweep)

    c = sub.add_parser("compose", help="compose two checkpoints in both orders and score them")
    c.add_argument("--a", required=True, help="first checkpoint")
    c.add_argument("--b", required=True, help="second checkpoint")
    c.add_argument("--task", required=True, help="task the first map was trained on")
    c.add_argument("--task-b", help="task the second map was trained on (same model)")
    c.add_argument("--out", help="report path (default: stdout)")
    c.set_defaults(func=_compose)

    e = sub.add_parser("eval", help="held-out evaluation of a checkpoint at a given strength")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--strength", type=float, default=1.0, help="blend in [0, 1] (default 1)")
    e.add_argument("--out", help="report path (default: stdout)")
    e.set_defaults(func=_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigValidationError, ConfigError, ModelLoadError, CheckpointError, TaskLoadError,
            UsageError, ShapeError, FileNotFoundError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
