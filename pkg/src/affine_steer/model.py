"""Frozen feed-forward models with hook points for affine transports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Rng, Tape, Tensor

MODEL_FORMAT_VERSION = 1
BLOCK_KINDS = ("linear", "layernorm", "tanh", "gelu", "relu")
NONLINEARITIES = ("tanh", "gelu", "relu")


class ConfigError(ValueError):
    """Model/transport layouts that do not fit together."""


class ModelLoadError(ValueError):
    pass


@dataclass(frozen=True)
class LayerBlock:
    kind: str
    in_dim: int
    out_dim: int
    params: dict = field(default_factory=dict)
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.kind == "linear":
            w, b = self.params.get("weight"), self.params.get("bias")
            if w is None or b is None:
                raise ConfigError("linear block needs 'weight' and 'bias'")
            if w.shape != (self.in_dim, self.out_dim) or b.shape != (1, self.out_dim):
                raise ConfigError(
                    f"linear block params {w.shape}/{b.shape} do not match"
                    f" {self.in_dim}->{self.out_dim}"
                )
        else:
            if self.in_dim != self.out_dim:
                raise ConfigError(f"{self.kind} block must keep its width")
            if self.kind == "layernorm":
                for name in ("gain", "bias"):
                    p = self.params.get(name)
                    if p is None or p.shape != (1, self.out_dim):
                        raise ConfigError(f"layernorm block needs '{name}' of shape (1, {self.out_dim})")
                if not self.eps > 0:
                    raise ConfigError("layernorm eps must be positive")
        for p in self.params.values():
            p.setflags(write=False)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "linear":
            return T.add(T.matmul(x, Tensor(self.params["weight"])), Tensor(self.params["bias"]))
        if self.kind == "layernorm":
            return T.layernorm(x, Tensor(self.params["gain"]), Tensor(self.params["bias"]), self.eps)
        return T.elementwise(self.kind, x)


@dataclass(frozen=True)
class FrozenModel:
    blocks: tuple[LayerBlock, ...]
    hooks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "hooks", tuple(int(h) for h in self.hooks))
        if not self.blocks:
            raise ConfigError("model has no blocks")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigError(f"block widths do not chain: {prev.out_dim} -> {nxt.in_dim}")
        last = -1
        for h in self.hooks:
            if h <= last:
                raise ConfigError(f"hooks must be strictly increasing, got {list(self.hooks)}")
            if not 0 <= h < len(self.blocks) - 1:
                raise ConfigError(
                    f"hook index {h} out of range: must be < {len(self.blocks) - 1}"
                    " (the final block is never hooked)"
                )
            last = h

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].out_dim

    @property
    def hook_dims(self) -> tuple[int, ...]:
        return tuple(self.blocks[h].out_dim for h in self.hooks)

    def to_dict(self) -> dict:
        blocks = []
        for b in self.blocks:
            entry = {"kind": b.kind, "dims": [b.in_dim, b.out_dim]}
            if b.kind == "layernorm":
                entry["eps"] = b.eps
            entry["params"] = {k: v.tolist() for k, v in sorted(b.params.items())}
            blocks.append(entry)
        return {"version": MODEL_FORMAT_VERSION, "blocks": blocks, "hooks": list(self.hooks)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), allow_nan=False)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class ActivationTrace:
    """Per-hook activation matrices, plus the tape/params when gradients are tracked."""

    layers: list[Tensor]
    tape: Tape | None = None
    params: list[tuple[Tensor, Tensor]] | None = None

    @property
    def rows(self) -> int:
        return self.layers[0].rows if self.layers else 0

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.layers]

    def take_rows(self, idx) -> ActivationTrace:
        return ActivationTrace([Tensor(t.data[idx]) for t in self.layers])


def forward_with_hooks(model: FrozenModel, transports, x, track_gradients: bool = False):
    """Run ``model`` on ``x`` with a transport inserted after every hooked block.

    ``transports`` is ``None`` (clean run), a ``TransportStack``, or a list of
    ``(omega, bias)`` tensor pairs already living on a tape.  With
    ``track_gradients`` a stack is lifted onto a fresh tape and the trace
    carries that tape and the parameter tensors.

    Returns ``(output, trace)`` where the trace holds post-transport
    activations at each hook.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.cols != model.in_dim:
        raise ConfigError(f"input width {x.cols} does not match model input width {model.in_dim}")

    tape = None
    params = None
    if transports is not None:
        if isinstance(transports, (list, tuple)):
            params = list(transports)
            tape = _tape_of_params(params)
        else:
            if track_gradients:
                tape = Tape()
                params = [(tape.param(m.omega[None, :]), tape.param(m.bias[None, :])) for m in transports.maps]
            else:
                params = [(Tensor(m.omega), Tensor(m.bias)) for m in transports.maps]
        if len(params) != len(model.hooks):
            raise ConfigError(f"{len(params)} transports for {len(model.hooks)} hooks")
        for (w, b), d in zip(params, model.hook_dims):
            if w.shape != (1, d) or b.shape != (1, d):
                raise ConfigError(f"transport width {w.cols} does not match hook width {d}")

    hook_slot = {h: i for i, h in enumerate(model.hooks)}
    layers = []
    h = x
    for i, block in enumerate(model.blocks):
        h = block(h)
        slot = hook_slot.get(i)
        if slot is not None:
            if params is not None:
                w, b = params[slot]
                h = T.affine_scale_shift(h, w, b)
            layers.append(h)
    return h, ActivationTrace(layers, tape=tape, params=params)


def _tape_of_params(params) -> Tape | None:
    for w, b in params:
        if w.tape is not None:
            return w.tape
        if b.tape is not None:
            return b.tape
    return None


def precompute_targets(model: FrozenModel, y_samples) -> ActivationTrace:
    """Clean activation trace of target samples; computed once and reused."""
    y = np.asarray(y_samples, dtype=np.float64)
    if y.size == 0:
        y = y.reshape(0, model.in_dim)
    _, trace = forward_with_hooks(model, None, Tensor(y))
    return ActivationTrace([Tensor(t.data) for t in trace.layers])


def generate_synthetic(
    seed: int,
    depth: int,
    widths: Sequence[int],
    hook_policy="layernorm",
    nonlinearity: str = "tanh",
    in_dim: int | None = None,
) -> FrozenModel:
    """Seeded random model of ``depth`` layers.

    Every layer but the last is ``linear -> layernorm -> nonlinearity``;
    the last is a single linear readout.  ``widths[k]`` is the output width
    of layer ``k`` and the input width defaults to ``widths[0]``.  Linear
    weights are drawn from ``Normal(0, 1/fan_in)``, linear biases from
    ``Normal(0, 0.1**2)``; layernorm gains and biases are 1 and 0.

    ``hook_policy="layernorm"`` hooks after each layernorm block; a list of
    block indices places hooks explicitly.
    """
    if depth < 2:
        raise ConfigError("depth must be at least 2")
    widths = [int(w) for w in widths]
    if len(widths) != depth or any(w <= 0 for w in widths):
        raise ConfigError(f"need {depth} positive widths, got {widths}")
    if nonlinearity not in NONLINEARITIES:
        raise ConfigError(f"unknown nonlinearity {nonlinearity!r}")
    rng = Rng(seed)
    d_prev = widths[0] if in_dim is None else int(in_dim)
    blocks: list[LayerBlock] = []
    for k, d in enumerate(widths):
        layer_rng = rng.split(k)
        weight = layer_rng.normal((d_prev, d), scale=1.0 / np.sqrt(d_prev))
        bias = layer_rng.normal((1, d), scale=0.1)
        blocks.append(LayerBlock("linear", d_prev, d, {"weight": weight, "bias": bias}))
        if k < depth - 1:
            blocks.append(LayerBlock("layernorm", d, d, {"gain": np.ones((1, d)), "bias": np.zeros((1, d))}))
            blocks.append(LayerBlock(nonlinearity, d, d))
        d_prev = d
    if hook_policy == "layernorm":
        hooks = [i for i, b in enumerate(blocks[:-1]) if b.kind == "layernorm"]
    elif isinstance(hook_policy, str):
        raise ConfigError(f"unknown hook policy {hook_policy!r}")
    else:
        hooks = list(hook_policy)
    return FrozenModel(tuple(blocks), tuple(hooks))


# --- serialization --------------------------------------------------------

def save_model(model: FrozenModel, path) -> None:
    Path(path).write_text(model.to_json())


def model_from_dict(doc) -> FrozenModel:
    if not isinstance(doc, dict):
        raise ModelLoadError("model document must be a JSON object")
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelLoadError(f"version: unsupported model format version {version!r}")
    raw_blocks = doc.get("blocks")
    if not isinstance(raw_blocks, list) or not raw_blocks:
        raise ModelLoadError("blocks: expected a non-empty list")
    blocks = []
    for i, rb in enumerate(raw_blocks):
        where = f"blocks[{i}]"
        try:
            kind = rb["kind"]
            in_dim, out_dim = (int(v) for v in rb["dims"])
            params = {k: np.array(v, dtype=np.float64) for k, v in rb.get("params", {}).items()}
            for name, p in params.items():
                if p.ndim != 2:
                    raise ModelLoadError(f"{where}.params.{name}: expected a 2-D array")
            blocks.append(LayerBlock(kind, in_dim, out_dim, params, float(rb.get("eps", 1e-5))))
        except ModelLoadError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelLoadError(f"{where}: {exc}") from exc
    hooks = doc.get("hooks")
    if not isinstance(hooks, list):
        raise ModelLoadError("hooks: expected a list")
    try:
        return FrozenModel(tuple(blocks), tuple(hooks))
    except ConfigError as exc:
        raise ModelLoadError(f"hooks: {exc}") from exc


def load_model(path) -> FrozenModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"malformed model file {path}: {exc}") from exc
    return model_from_dict(doc)
