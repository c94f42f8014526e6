"""Coordinate-wise affine transport maps, one per hook."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, UsageError


CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ModelHashWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AffineMap:
    """``z -> omega * z + bias`` applied row-wise."""

    omega: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        omega = np.array(self.omega, dtype=np.float64).reshape(-1)
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if omega.shape != bias.shape:
            raise T.ShapeError(f"omega has {omega.size} entries but bias has {bias.size}")
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(bias))):
            raise T.NumericalError("affine map entries must be finite")
        omega.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "bias", bias)

    @property
    def dim(self) -> int:
        return self.omega.size

    @classmethod
    def identity(cls, dim: int) -> AffineMap:
        return cls(np.ones(dim), np.zeros(dim))

    def __eq__(self, other):
        if not isinstance(other, AffineMap):
            return NotImplemented
        return np.array_equal(self.omega, other.omega) and np.array_equal(self.bias, other.bias)

    __hash__ = None


@dataclass(frozen=True)
class TransportStack:
    maps: tuple[AffineMap, ...]

    def __post_init__(self):
        object.__setattr__(self, "maps", tuple(self.maps))

    @property
    def hook_dims(self) -> tuple[int, ...]:
        return tuple(m.dim for m in self.maps)

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, i) -> AffineMap:
        return self.maps[i]


def identity_stack(hook_dims: Sequence[int]) -> TransportStack:
    return TransportStack(tuple(AffineMap.identity(d) for d in hook_dims))


def apply(m: AffineMap, z) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.cols != m.dim:
        raise T.ShapeError(f"map width {m.dim} does not match activation width {z.cols}")
    return T.affine_scale_shift(z, Tensor(m.omega), Tensor(m.bias))


def _check_strength(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"strength must lie in [0, 1], got {lam}")
    return lam


def blend(m: AffineMap, lam: float) -> AffineMap:
    """The map ``(1 - lam) * z + lam * m(z)`` in closed form."""
    lam = _check_strength(lam)
    if lam == 1.0:
        return m
    return AffineMap((1.0 - lam) + lam * m.omega, lam * m.bias)


def apply_with_strength(m: AffineMap, z, lam: float) -> Tensor:
    lam = _check_strength(lam)
    z = z if isinstance(z, Tensor) else Tensor(z)
    if lam == 0.0:
        if z.cols != m.dim:
            raise T.ShapeError(f"map width {m.dim} does not match activation width {z.cols}")
        return z
    return apply(blend(m, lam), z)


def with_strength(stack: TransportStack, lam: float):
    """Stack blended towards identity; ``None`` (no intervention at all) for ``lam == 0``."""
    lam = _check_strength(lam)
    if lam == 0.0:
        return None
    return TransportStack(tuple(blend(m, lam) for m in stack.maps))


def compose(first: TransportStack, second: TransportStack) -> TransportStack:
    """Per hook, the map ``z -> second(first(z))`` in closed form."""
    if first.hook_dims != second.hook_dims:
        raise T.ShapeError(f"cannot compose stacks with hook dims {first.hook_dims} and {second.hook_dims}")
    maps = []
    for a, b in zip(first.maps, second.maps):
        maps.append(AffineMap(b.omega * a.omega, b.omega * a.bias + b.bias))
    return TransportStack(tuple(maps))


@dataclass(frozen=True)
class Support:
    total: int
    per_hook: tuple[int, ...]
    # count of (omega != 1) plus count of (bias != 0), i.e. a coordinate moved both ways counts twice
    literal_sum: int
    per_hook_literal: tuple[int, ...]

    def fractions(self, hook_dims: Sequence[int]) -> tuple[float, ...]:
        return tuple(c / d for c, d in zip(self.per_hook, hook_dims))


def support(stack: TransportStack, tolerance: float = 0.0) -> Support:
    """Number of coordinates whose map is not the identity.

    A coordinate counts once if ``|omega - 1| > tolerance`` or
    ``|bias| > tolerance``.
    """
    if tolerance < 0:
        raise UsageError("tolerance must be non-negative")
    per_hook, per_literal = [], []
    for m in stack.maps:
        scaled = np.abs(m.omega - 1.0) > tolerance
        shifted = np.abs(m.bias) > tolerance
        per_hook.append(int(np.count_nonzero(scaled | shifted)))
        per_literal.append(int(np.count_nonzero(scaled) + np.count_nonzero(shifted)))
    return Support(sum(per_hook), tuple(per_hook), sum(per_literal), tuple(per_literal))


# --- checkpoints ----------------------------------------------------------

def stack_to_dict(stack: TransportStack, model_hash: str | None = None, train_config: dict | None = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "model_hash": model_hash,
        "hooks": [{"dim": m.dim, "omega": m.omega.tolist(), "bias": m.bias.tolist()} for m in stack.maps],
        "train_config_echo": train_config,
    }


def save_stack(stack: TransportStack, path, model_hash: str | None = None, train_config: dict | None = None) -> None:
    doc = stack_to_dict(stack, model_hash, train_config)
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")


def stack_from_dict(doc: dict, model=None) -> TransportStack:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    version = doc.get("version")
    if version not in (0, CHECKPOINT_VERSION):
        raise CheckpointError(f"version: unsupported checkpoint version {version!r}")
    hooks = doc.get("hooks")
    if not isinstance(hooks, list):
        raise CheckpointError("hooks: expected a list")
    maps = []
    for i, h in enumerate(hooks):
        try:
            m = AffineMap(h["omega"], h["bias"])
        except (KeyError, TypeError, ValueError, ArithmeticError) as exc:
            raise CheckpointError(f"hooks[{i}]: {exc}") from exc
        if "dim" in h and int(h["dim"]) != m.dim:
            raise CheckpointError(f"hooks[{i}].dim: declares {h['dim']} but holds {m.dim} entries")
        maps.append(m)
    stack = TransportStack(tuple(maps))
    if doc.get("model_hash") is None:
        warnings.warn("checkpoint carries no model hash; model compatibility is unchecked", ModelHashWarning, stacklevel=3)
    if model is not None:
        if stack.hook_dims != tuple(model.hook_dims):
            raise CheckpointError(
                f"hooks: checkpoint hook dims {list(stack.hook_dims)} do not match model {list(model.hook_dims)}"
            )
        stored = doc.get("model_hash")
        if stored is not None and stored != model.hash():
            warnings.warn("checkpoint was trained against a different model file", ModelHashWarning, stacklevel=3)
    return stack


def load_stack(path, model=None) -> TransportStack:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return stack_from_dict(doc, model)
