"""Synthetic steering tasks: a frozen model, source inputs and target traces.

Targets are the trace of inputs run through the model with a hidden sparse
affine map inserted at one hook.  That planted map is written to its own
file; the task data only records its SHA-256, so training never reads it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ActivationTrace, FrozenModel, forward_with_hooks, generate_synthetic, load_model, save_model
from .tensor import Rng, Tensor
from .train import ConfigValidationError
from .transport import AffineMap, TransportStack, identity_stack, stack_from_dict, stack_to_dict

TASK_FORMAT_VERSION = 1
MODEL_FILE = "model.json"
DATA_FILE = "data.json"
GROUNDTRUTH_FILE = "groundtruth.json"


@dataclass(frozen=True)
class PlantSpec:
    hook_index: int
    support_size: int
    scale_range: tuple[float, float] = (0.5, 1.0)
    shift_range: tuple[float, float] = (0.5, 1.0)
    plant_seed: int = 0
    # random signs on the offsets; negative scale offsets shrink or flip coordinates
    signed: bool = True


@dataclass(frozen=True)
class TaskSpec:
    model_seed: int = 0
    data_seed: int = 0
    n_train: int = 256
    n_heldout: int = 256
    depth: int = 4
    widths: tuple[int, ...] = (16, 16, 16, 16)
    nonlinearity: str = "tanh"
    hook_policy: str | tuple[int, ...] = "layernorm"
    input_dist: str = "gaussian"
    # "same": targets come from the source inputs; "fresh": from independent draws
    target_inputs: str = "same"
    planted: PlantSpec | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        if not isinstance(self.hook_policy, str):
            d["hook_policy"] = list(self.hook_policy)
        if self.planted is not None:
            d["planted"]["scale_range"] = list(self.planted.scale_range)
            d["planted"]["shift_range"] = list(self.planted.shift_range)
        return d

    @classmethod
    def from_dict(cls, doc: dict, path: str = "task") -> TaskSpec:
        if not isinstance(doc, dict):
            raise ConfigValidationError(f"{path}: expected an object")
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        for key in doc:
            if key not in known:
                raise ConfigValidationError(f"{path}.{key}: unknown field")
        planted = doc.pop("planted", None)
        if planted is not None:
            if not isinstance(planted, dict):
                raise ConfigValidationError(f"{path}.planted: expected an object or null")
            pknown = set(PlantSpec.__dataclass_fields__)
            for key in planted:
                if key not in pknown:
                    raise ConfigValidationError(f"{path}.planted.{key}: unknown field")
            for key in ("hook_index", "support_size"):
                if key not in planted:
                    raise ConfigValidationError(f"{path}.planted.{key}: required")
            planted = dict(planted)
            for key in ("scale_range", "shift_range"):
                if key in planted:
                    planted[key] = tuple(float(v) for v in planted[key])
            planted = PlantSpec(**planted)
        if "widths" in doc:
            doc["widths"] = tuple(int(w) for w in doc["widths"])
        if isinstance(doc.get("hook_policy"), list):
            doc["hook_policy"] = tuple(int(h) for h in doc["hook_policy"])
        spec = cls(**doc, planted=planted)
        spec.validate(path)
        return spec

    def validate(self, path: str = "task") -> None:
        if self.n_train < 2 or self.n_heldout < 2:
            raise ConfigValidationError(f"{path}.n_train: need at least 2 train and held-out samples")
        if self.input_dist != "gaussian":
            raise ConfigValidationError(f"{path}.input_dist: only 'gaussian' is supported")
        if self.target_inputs not in ("same", "fresh"):
            raise ConfigValidationError(f"{path}.target_inputs: must be 'same' or 'fresh'")


def build_model(spec: TaskSpec) -> FrozenModel:
    return generate_synthetic(spec.model_seed, spec.depth, spec.widths, spec.hook_policy, spec.nonlinearity)


def planted_stack(model: FrozenModel, plant: PlantSpec | None) -> tuple[TransportStack, list[int]]:
    """The hidden intervention and the coordinates it touches."""
    stack = identity_stack(model.hook_dims)
    if plant is None or plant.support_size == 0:
        return stack, []
    if not 0 <= plant.hook_index < len(model.hooks):
        raise ConfigValidationError(
            f"task.planted.hook_index: {plant.hook_index} is not a valid hook (model has {len(model.hooks)})"
        )
    d = model.hook_dims[plant.hook_index]
    if not 0 <= plant.support_size <= d:
        raise ConfigValidationError(f"task.planted.support_size: must be in [0, {d}]")
    rng = Rng(plant.plant_seed)
    coords = np.sort(rng.choice(d, plant.support_size))
    k = plant.support_size
    ds = rng.uniform(*plant.scale_range, size=k)
    db = rng.uniform(*plant.shift_range, size=k)
    if plant.signed:
        ds = ds * rng.signs(k)
        db = db * rng.signs(k)
    omega = np.ones(d)
    bias = np.zeros(d)
    omega[coords] += ds
    bias[coords] = db
    maps = list(stack.maps)
    maps[plant.hook_index] = AffineMap(omega, bias)
    return TransportStack(tuple(maps)), [int(c) for c in coords]


@dataclass
class Task:
    spec: TaskSpec
    model: FrozenModel
    source_train: np.ndarray
    source_heldout: np.ndarray
    target_train: ActivationTrace
    target_heldout: ActivationTrace
    groundtruth_sha256: str | None = None
    directory: Path | None = field(default=None, compare=False)


def make_task(spec: TaskSpec) -> tuple[Task, dict]:
    """Build a task in memory; returns it with the sealed ground-truth document."""
    spec.validate()
    model = build_model(spec)
    truth, coords = planted_stack(model, spec.planted)
    rng = Rng(spec.data_seed)
    x_train = rng.split(0).normal((spec.n_train, model.in_dim))
    x_held = rng.split(1).normal((spec.n_heldout, model.in_dim))
    if spec.target_inputs == "same":
        y_train, y_held = x_train, x_held
    else:
        y_train = rng.split(2).normal((spec.n_train, model.in_dim))
        y_held = rng.split(3).normal((spec.n_heldout, model.in_dim))
    _, tr = forward_with_hooks(model, truth, Tensor(y_train))
    _, th = forward_with_hooks(model, truth, Tensor(y_held))
    groundtruth = {
        "version": TASK_FORMAT_VERSION,
        "hook_index": None if spec.planted is None else spec.planted.hook_index,
        "coords": coords,
        "stack": stack_to_dict(truth, model.hash()),
    }
    gt_bytes = _dump(groundtruth)
    task = Task(
        spec, model, x_train, x_held,
        ActivationTrace([Tensor(t.data) for t in tr.layers]),
        ActivationTrace([Tensor(t.data) for t in th.layers]),
        hashlib.sha256(gt_bytes.encode()).hexdigest(),
    )
    return task, groundtruth


def _dump(doc) -> str:
    return json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n"


def gen_task(spec: TaskSpec, out_dir) -> Task:
    """Write ``model.json``, ``data.json`` and the sealed ``groundtruth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task, groundtruth = make_task(spec)
    save_model(task.model, out / MODEL_FILE)
    (out / GROUNDTRUTH_FILE).write_text(_dump(groundtruth))
    data = {
        "version": TASK_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "model_hash": task.model.hash(),
        "groundtruth_sha256": task.groundtruth_sha256,
        "source_train": task.source_train.tolist(),
        "source_heldout": task.source_heldout.tolist(),
        "target_train": [t.data.tolist() for t in task.target_train.layers],
        "target_heldout": [t.data.tolist() for t in task.target_heldout.layers],
    }
    (out / DATA_FILE).write_text(_dump(data))
    task.directory = out
    return task


class TaskLoadError(ValueError):
    pass


def load_task(task_dir) -> Task:
    """Load model and data of a task; the ground-truth file is not opened."""
    d = Path(task_dir)
    model = load_model(d / MODEL_FILE)
    try:
        data = json.loads((d / DATA_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TaskLoadError(f"cannot read {d / DATA_FILE}: {exc}") from exc
    if data.get("version") != TASK_FORMAT_VERSION:
        raise TaskLoadError(f"version: unsupported task data version {data.get('version')!r}")
    if data.get("model_hash") != model.hash():
        raise TaskLoadError("model_hash: data file does not belong to this model")
    spec = TaskSpec.from_dict(data["spec"])

    def trace(key):
        layers = [Tensor(np.array(a, dtype=np.float64)) for a in data[key]]
        if [t.cols for t in layers] != list(model.hook_dims):
            raise TaskLoadError(f"{key}: hook widths do not match the model")
        return ActivationTrace(layers)

    return Task(
        spec,
        model,
        np.array(data["source_train"], dtype=np.float64).reshape(-1, model.in_dim),
        np.array(data["source_heldout"], dtype=np.float64).reshape(-1, model.in_dim),
        trace("target_train"),
        trace("target_heldout"),
        data.get("groundtruth_sha256"),
        d,
    )


def read_groundtruth(task: Task) -> dict:
    """Open the sealed planted map for scoring, checking it against the recorded hash."""
    if task.directory is None:
        raise TaskLoadError("task has no directory; ground truth is only available from files")
    raw = (task.directory / GROUNDTRUTH_FILE).read_text()
    if hashlib.sha256(raw.encode()).hexdigest() != task.groundtruth_sha256:
        raise TaskLoadError("groundtruth.json does not match the hash recorded in data.json")
    doc = json.loads(raw)
    doc["stack"] = stack_from_dict(doc["stack"], task.model)
    return doc
