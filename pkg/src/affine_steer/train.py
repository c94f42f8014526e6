"""Proximal SGD on the end-to-end sliced Wasserstein cost."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .loss import LossBreakdown, global_cost, regularizer_values
from .model import ActivationTrace, FrozenModel, forward_with_hooks, precompute_targets
from .prox import sparse_group_prox
from .tensor import NumericalError, Rng, Tensor
from .transport import AffineMap, TransportStack, identity_stack, support

log = logging.getLogger(__name__)

LR_SCHEDULES = ("cosine", "constant")
PROX_SCALINGS = ("standard", "literal")


class ConfigValidationError(ValueError):
    """Bad configuration value; the message starts with the offending field path."""


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.0
    lambda1: float = 1.0
    lambdaG: float = 1.0
    lr0: float = 0.1
    steps: int = 1000
    batch: int = 32
    seed: int = 0
    refit_steps: int = 0
    lr_schedule: str = "cosine"
    prox_scaling: str = "literal"

    def __post_init__(self):
        checks = [
            ("gamma", self.gamma >= 0, "must be >= 0"),
            ("lambda1", self.lambda1 >= 0, "must be >= 0"),
            ("lambdaG", self.lambdaG >= 0, "must be >= 0"),
            ("lr0", self.lr0 > 0, "must be > 0"),
            ("steps", self.steps >= 1, "must be >= 1"),
            ("batch", self.batch >= 2, "must be >= 2"),
            ("refit_steps", self.refit_steps >= 0, "must be >= 0"),
            ("lr_schedule", self.lr_schedule in LR_SCHEDULES, f"must be one of {LR_SCHEDULES}"),
            ("prox_scaling", self.prox_scaling in PROX_SCALINGS, f"must be one of {PROX_SCALINGS}"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigValidationError(f"{name}: {msg}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict, path: str = "train") -> TrainConfig:
        if not isinstance(doc, dict):
            raise ConfigValidationError(f"{path}: expected an object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigValidationError(f"{path}.{key}: unknown field")
            ftype = known[key].type
            try:
                if ftype == "float":
                    if isinstance(value, bool) or not isinstance(value, (int, float)):
                        raise TypeError
                    value = float(value)
                elif ftype == "int":
                    if isinstance(value, bool) or not isinstance(value, int):
                        raise TypeError
                elif not isinstance(value, str):
                    raise TypeError
            except TypeError:
                raise ConfigValidationError(f"{path}.{key}: expected {ftype}, got {value!r}") from None
            kwargs[key] = value
        if "gamma" not in kwargs:
            log.info("%s.gamma not set; using gamma = 0 (no sparsity)", path)
        try:
            return cls(**kwargs)
        except ConfigValidationError as exc:
            raise ConfigValidationError(f"{path}.{exc}") from None


def learning_rate(config: TrainConfig, step: int, total: int | None = None) -> float:
    """Cosine decay ``lr0 * (1 + cos(pi * step / total)) / 2``, or a constant rate."""
    if config.lr_schedule == "constant":
        return config.lr0
    total = config.steps if total is None else total
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def prox_thresholds(config: TrainConfig, lr: float, dim: int, gamma: float | None = None) -> tuple[float, float]:
    gamma = config.gamma if gamma is None else gamma
    if config.prox_scaling == "literal":
        return gamma * config.lambda1, gamma * config.lambdaG
    return lr * gamma * config.lambda1, lr * gamma * config.lambdaG * math.sqrt(dim)


@dataclass
class StepRecord:
    step: int
    lr: float
    total_cost: float
    per_layer_delta: list[float]
    r1: float
    rg: float
    support: int
    wall_time: float


@dataclass
class RunMetrics:
    records: list[StepRecord] = field(default_factory=list)

    def csv_header(self, n_hooks: int) -> list[str]:
        return ["step", "lr", "total_cost"] + [f"delta_l{k}" for k in range(n_hooks)] + ["r1", "rg", "support"]

    def write_csv(self, path, n_hooks: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.csv_header(n_hooks))
            for r in self.records:
                w.writerow([r.step, repr(r.lr), repr(r.total_cost), *map(repr, r.per_layer_delta), repr(r.r1), repr(r.rg), r.support])

    def to_dict(self, include_time: bool = False) -> dict:
        """Records as plain dicts; wall times only on request since they are not reproducible."""
        records = []
        for r in self.records:
            d = dataclasses.asdict(r)
            if not include_time:
                del d["wall_time"]
            records.append(d)
        return {"records": records}

    def write_json(self, path, include_time: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_time), indent=1) + "\n")


def train_step(
    model: FrozenModel,
    transports: TransportStack,
    source_batch,
    target_batch: ActivationTrace,
    config: TrainConfig,
    step_index: int,
    *,
    lr: float | None = None,
    gamma: float | None = None,
    frozen: list[tuple[np.ndarray, np.ndarray]] | None = None,
    target_sorted: list[np.ndarray] | None = None,
) -> tuple[TransportStack, LossBreakdown]:
    """One proximal gradient step.

    Forward with transports on the source batch, global cost against the
    target batch, gradient step on every (omega, bias), then per hook the
    sparse-group prox on ``omega - 1`` and on ``bias``.  ``frozen`` masks
    (True = frozen) pin entries during refitting.
    """
    source_batch = source_batch if isinstance(source_batch, Tensor) else Tensor(source_batch)
    if source_batch.rows != target_batch.rows:
        raise T.UsageError(f"source batch has {source_batch.rows} rows, target batch {target_batch.rows}")
    if lr is None:
        lr = learning_rate(config, step_index)
    _, trace = forward_with_hooks(model, transports, source_batch, track_gradients=True)
    cost = global_cost(trace, target_batch, target_sorted)
    try:
        grads = T.backward(trace.tape, cost.graph)
    except NumericalError as exc:
        raise NumericalError(
            f"{exc} at step {step_index} (lr={lr!r}, per-layer cost {cost.per_layer_delta},"
            f" max |omega - 1| {[float(np.abs(m.omega - 1).max()) for m in transports.maps]},"
            f" max |bias| {[float(np.abs(m.bias).max()) for m in transports.maps]})"
        ) from exc

    new_maps = []
    for k, ((w_t, b_t), m) in enumerate(zip(trace.params, transports.maps)):
        g_w = grads[w_t][0]
        g_b = grads[b_t][0]
        if frozen is not None:
            g_w = np.where(frozen[k][0], 0.0, g_w)
            g_b = np.where(frozen[k][1], 0.0, g_b)
        omega = m.omega - lr * g_w
        bias = m.bias - lr * g_b
        tau1, tau_g = prox_thresholds(config, lr, m.dim, gamma)
        omega = sparse_group_prox(omega - 1.0, tau1, tau_g) + 1.0
        bias = sparse_group_prox(bias, tau1, tau_g)
        if frozen is not None:
            omega = np.where(frozen[k][0], 1.0, omega)
            bias = np.where(frozen[k][1], 0.0, bias)
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(bias))):
            raise NumericalError(
                f"non-finite parameters at step {step_index} (lr={lr!r}, hook {k},"
                f" per-layer cost {cost.per_layer_delta})"
            )
        new_maps.append(AffineMap(omega, bias))
    new_stack = TransportStack(tuple(new_maps))
    r1, rg = regularizer_values(new_stack, config.lambda1, config.lambdaG)
    cost.reg_l1, cost.reg_group = r1, rg
    g = config.gamma if gamma is None else gamma
    cost.objective = cost.total_cost + g * (r1 + rg)
    return new_stack, cost


class _Batcher:
    """Index batches without replacement, reshuffled every epoch."""

    def __init__(self, n_items: int, batch: int, rng: Rng):
        self.n_items = n_items
        self.batch = batch
        self.rng = rng
        self._order = rng.permutation(n_items)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch > self.n_items:
            self._order = self.rng.permutation(self.n_items)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch]
        self._pos += self.batch
        return idx


def train(
    model: FrozenModel,
    source_samples,
    target,
    config: TrainConfig,
    init: TransportStack | None = None,
) -> tuple[TransportStack, RunMetrics]:
    """Fit a transport stack by proximal SGD.

    ``target`` is either raw target inputs (their clean trace is computed
    once) or an already computed :class:`ActivationTrace`.
    """
    source = np.asarray(source_samples, dtype=np.float64)
    target_trace = target if isinstance(target, ActivationTrace) else precompute_targets(model, target)
    n_src, n_tgt = source.shape[0], target_trace.rows
    if n_src == 0 or n_tgt == 0:
        raise T.UsageError("source and target sample sets must be non-empty")
    if len(target_trace.layers) != len(model.hooks):
        raise T.UsageError(f"target trace has {len(target_trace.layers)} hooks, model has {len(model.hooks)}")
    batch = min(config.batch, n_src, n_tgt)
    if batch < 2:
        raise T.UsageError("need at least 2 samples on each side")
    if batch != config.batch:
        log.info("batch size reduced from %d to %d to fit the sample sets", config.batch, batch)

    target_arrays = target_trace.arrays()
    rng = Rng(config.seed)
    src_batches = _Batcher(n_src, batch, rng.split(1))
    tgt_batches = _Batcher(n_tgt, batch, rng.split(2))

    stack = identity_stack(model.hook_dims) if init is None else init
    metrics = RunMetrics()
    t0 = time.perf_counter()

    def run(n_steps: int, gamma: float | None, frozen, offset: int):
        nonlocal stack
        for t in range(n_steps):
            lr = learning_rate(config, t, n_steps)
            xs = source[src_batches.next()]
            tgt_idx = tgt_batches.next()
            tgt = ActivationTrace([Tensor(a[tgt_idx]) for a in target_arrays])
            stack, cost = train_step(model, stack, xs, tgt, config, t, lr=lr, gamma=gamma, frozen=frozen)
            metrics.records.append(
                StepRecord(
                    offset + t, lr, cost.total_cost, cost.per_layer_delta,
                    cost.reg_l1, cost.reg_group, support(stack).total, time.perf_counter() - t0,
                )
            )

    run(config.steps, None, None, 0)
    if config.refit_steps > 0:
        frozen = [(m.omega == 1.0, m.bias == 0.0) for m in stack.maps]
        run(config.refit_steps, 0.0, frozen, config.steps)
    return stack, metrics
