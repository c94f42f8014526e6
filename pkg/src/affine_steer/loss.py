"""Sliced 1-D Wasserstein costs between activation traces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ActivationTrace
from .tensor import Tensor, UsageError


@dataclass
class LossBreakdown:
    per_layer_delta: list[float]
    total_cost: float
    reg_l1: float = 0.0
    reg_group: float = 0.0
    objective: float | None = None
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "per_layer_delta": list(self.per_layer_delta),
            "total_cost": self.total_cost,
            "reg_l1": self.reg_l1,
            "reg_group": self.reg_group,
            "objective": self.objective,
        }


def sort_target(v) -> np.ndarray:
    """Column-sorted constant copy of a target activation matrix."""
    v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    return np.sort(v, axis=0, kind="stable")


def sliced_w2(u: Tensor, v, v_sorted: np.ndarray | None = None) -> Tensor:
    """Sum over columns of the squared 1-D Wasserstein-2 distance.

    Equals ``(1/n) * sum_ij (sort(u)_ij - sort(v)_ij) ** 2`` with each column
    sorted independently.  Only ``u`` is differentiated; ``v`` is a constant.
    Pass ``v_sorted`` to reuse an already sorted target.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    if v_sorted is None:
        v_sorted = sort_target(v)
    if u.shape != v_sorted.shape:
        if u.cols == v_sorted.shape[1]:
            raise UsageError(f"sliced_w2 needs equal row counts, got {u.rows} and {v_sorted.shape[0]}")
        raise T.ShapeError(f"sliced_w2 shape mismatch: {u.shape} vs {v_sorted.shape}")
    n = u.rows
    if n == 0:
        raise UsageError("sliced_w2 needs at least one row")
    u_sorted, _ = T.sort_columns(u)
    diff = T.sub(u_sorted, Tensor(v_sorted))
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / n)


def global_cost(source: ActivationTrace, target: ActivationTrace, target_sorted=None) -> LossBreakdown:
    """Sum of ``sliced_w2`` over all hooks.

    The returned breakdown's ``graph`` is the differentiable total.
    """
    if len(source.layers) != len(target.layers):
        raise UsageError(f"trace layouts differ: {len(source.layers)} vs {len(target.layers)} hooks")
    if target_sorted is None:
        target_sorted = [sort_target(v) for v in target.layers]
    terms = [sliced_w2(u, None, vs) for u, vs in zip(source.layers, target_sorted)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return LossBreakdown([t.item() for t in terms], total.item(), graph=total)


def regularizer_values(stack, lambda1: float = 1.0, lambdaG: float = 1.0) -> tuple[float, float]:
    """Weighted penalties ``(lambda1 * R1, lambdaG * RG)`` of a transport stack.

    ``R1 = sum_l |omega_l - 1|_1 + |b_l|_1`` and
    ``RG = sum_l sqrt(d_l) * (|omega_l - 1|_2 + |b_l|_2)``.
    """
    if lambda1 < 0 or lambdaG < 0:
        raise UsageError("regularization weights must be non-negative")
    r1 = 0.0
    rg = 0.0
    for m in stack.maps:
        dw = m.omega - 1.0
        r1 += float(np.abs(dw).sum() + np.abs(m.bias).sum())
        rg += float(np.sqrt(m.dim) * (np.linalg.norm(dw) + np.linalg.norm(m.bias)))
    return lambda1 * r1, lambdaG * rg
