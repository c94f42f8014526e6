"""Dense 2-D tensors, a seedable RNG and a small reverse-mode tape.

Every value is a float64 matrix (rows = samples, columns = coordinates).
Row vectors of shape ``(1, d)`` broadcast over the rows of an ``(n, d)``
operand.  An op records itself on a :class:`Tape` as soon as one of its
inputs is tracked; untracked inputs (frozen weights, targets) are treated
as constants and receive no gradient.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2 / pi) * (x + 0.044715 * x**3)))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_FINITE_CHECK = False


class ShapeError(ValueError):
    pass


class UsageError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def set_finite_check(enabled: bool) -> bool:
    """Toggle NaN/Inf checking after every primitive. Returns the previous setting."""
    global _FINITE_CHECK
    previous = _FINITE_CHECK
    _FINITE_CHECK = bool(enabled)
    return previous


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _FINITE_CHECK and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {where}")


class Tensor:
    """A 2-D float64 array, optionally linked to a tape.

    Hashing and equality are by identity so tensors can key gradient dicts.
    """

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: Tape | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.tape = tape

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    fwd: Callable = field(repr=False)
    vjp: Callable = field(repr=False)
    saved: object = field(default=None, repr=False)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so each node's inputs are
    either leaves or outputs of earlier nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []

    def param(self, values) -> Tensor:
        """Create a tracked leaf tensor holding a copy of ``values``."""
        t = Tensor(np.array(values, dtype=np.float64), tape=self)
        self.leaves.append(t)
        return t

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward from the leaves; returns node outputs in order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = node.fwd(*args)
            values[id(node.output)] = out
            outs.append(out)
        return outs


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise UsageError("inputs are tracked on different tapes")
            tape = t.tape
    return tape


def _apply(op: str, fwd: Callable, vjp: Callable, *inputs: Tensor) -> Tensor:
    out_data, saved = fwd(*[t.data for t in inputs])
    _check_finite(out_data, op)
    tape = _tape_of(inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.tape = tape
    if tape is not None:
        tape.record(Node(op, tuple(inputs), out, fwd, vjp, saved))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(op: str, *shapes: tuple[int, int]) -> None:
    rows = {s[0] for s in shapes} - {1}
    cols = {s[1] for s in shapes} - {1}
    if len(rows) > 1 or len(cols) > 1:
        raise ShapeError(f"{op}: incompatible shapes {list(shapes)}")


# --- primitives -----------------------------------------------------------

def matmul(a: Tensor, w: Tensor) -> Tensor:
    a, w = as_tensor(a), as_tensor(w)
    if a.cols != w.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {w.shape}")

    def fwd(x, y):
        return x @ y, None

    def vjp(g, saved, x, y):
        return g @ y.T, x.T @ g

    return _apply("matmul", fwd, vjp, a, w)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)

    def fwd(x, y):
        return x + y, None

    def vjp(g, saved, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _apply("add", fwd, vjp, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)

    def fwd(x, y):
        return x - y, None

    def vjp(g, saved, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _apply("sub", fwd, vjp, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)

    def fwd(x, y):
        return x * y, None

    def vjp(g, saved, x, y):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _apply("mul", fwd, vjp, a, b)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)

    def fwd(x):
        return x * c, None

    def vjp(g, saved, x):
        return (g * c,)

    return _apply("scale", fwd, vjp, as_tensor(a))


def affine_scale_shift(z: Tensor, omega: Tensor, bias: Tensor) -> Tensor:
    """``omega * z + bias`` with ``omega`` and ``bias`` broadcast over rows."""
    z, omega, bias = as_tensor(z), as_tensor(omega), as_tensor(bias)
    if omega.shape != (1, z.cols) or bias.shape != (1, z.cols):
        raise ShapeError(
            f"affine_scale_shift: z {z.shape} needs omega/bias of shape (1, {z.cols}),"
            f" got {omega.shape} and {bias.shape}"
        )

    def fwd(x, w, b):
        return x * w + b, None

    def vjp(g, saved, x, w, b):
        return g * w, (g * x).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _apply("affine_scale_shift", fwd, vjp, z, omega, bias)


def tanh(a: Tensor) -> Tensor:
    def fwd(x):
        y = np.tanh(x)
        return y, y

    def vjp(g, y, x):
        return (g * (1.0 - y * y),)

    return _apply("tanh", fwd, vjp, as_tensor(a))


def relu(a: Tensor) -> Tensor:
    def fwd(x):
        return np.maximum(x, 0.0), None

    def vjp(g, saved, x):
        return (g * (x > 0.0),)

    return _apply("relu", fwd, vjp, as_tensor(a))


def gelu(a: Tensor) -> Tensor:
    def fwd(x):
        t = np.tanh(GELU_C * (x + GELU_A * x**3))
        return 0.5 * x * (1.0 + t), t

    def vjp(g, t, x):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _apply("gelu", fwd, vjp, as_tensor(a))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "affine_scale_shift": affine_scale_shift,
    "tanh": tanh,
    "gelu": gelu,
    "relu": relu,
}


def elementwise(op_kind: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*inputs)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by ``gain * xhat + bias``."""
    if not eps > 0:
        raise UsageError("layernorm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError(f"layernorm: gain/bias must be (1, {x.cols})")

    def fwd(v, gn, bs):
        mu = v.mean(axis=1, keepdims=True)
        xc = v - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat * gn + bs, (xhat, inv)

    def vjp(g, saved, v, gn, bs):
        xhat, inv = saved
        gx = g * gn
        dx = inv * (
            gx
            - gx.mean(axis=1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _apply("layernorm", fwd, vjp, x, gain, bias)


def sort_columns(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sort every column ascending; ties keep original row order.

    Returns the sorted tensor and ``perm`` with ``sorted[i, j] == x[perm[i, j], j]``.
    The backward pass scatters gradients through ``perm``, held constant.
    """
    x = as_tensor(x)

    def fwd(v):
        perm = np.argsort(v, axis=0, kind="stable")
        return np.take_along_axis(v, perm, axis=0), perm

    def vjp(g, perm, v):
        gx = np.empty_like(g)
        np.put_along_axis(gx, perm, g, axis=0)
        return (gx,)

    out = _apply("sort_columns", fwd, vjp, x)
    if out.tape is not None:
        perm = out.tape.nodes[-1].saved
    else:
        perm = np.argsort(x.data, axis=0, kind="stable")
    return out, perm


def sum_all(a: Tensor) -> Tensor:
    def fwd(x):
        return np.array([[x.sum()]]), None

    def vjp(g, saved, x):
        return (np.full_like(x, g[0, 0]),)

    return _apply("sum", fwd, vjp, as_tensor(a))


# --- differentiation ------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns a gradient per tape leaf.

    Leaves the loss does not depend on get a zero gradient.
    """
    if loss.shape != (1, 1):
        raise UsageError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[id(loss)] = np.ones((1, 1))
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g, node.saved, *[t.data for t in node.inputs])
            for t, gi in zip(node.inputs, in_grads):
                if t.tape is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    elif loss.tape is not None:
        raise UsageError("loss was recorded on a different tape")
    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.data) if g is None else g
        if not np.all(np.isfinite(out[leaf])):
            raise NumericalError("non-finite gradient")
    return out


def finite_diff_gradient(f: Callable[[np.ndarray], float], at, h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    Unreliable at kinks (e.g. ``abs`` at 0, ties in a sort).
    """
    if not h > 0:
        raise UsageError("finite difference step must be positive")
    x = np.array(at, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


# --- randomness -----------------------------------------------------------

class Rng:
    """Seedable, splittable counter-based generator (numpy Philox4x64).

    A child stream for ``key`` is seeded from ``SeedSequence(seed,
    spawn_key=parent_keys + (key,))`` so any stream can be rebuilt from the
    root seed and the path of keys alone.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in _path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key: int) -> Rng:
        return Rng(self.seed, self.path + (int(key),))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def signs(self, size) -> np.ndarray:
        return np.where(self._gen.integers(0, 2, size=size) == 1, 1.0, -1.0)
