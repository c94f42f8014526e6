"""Layer-local interventions fitted in closed form, and shared held-out scoring.

``fit_sequential_affine`` stands in for layerwise 1-D affine transport: at
each hook, one coordinate at a time, it fits the line mapping the sorted
source column onto the sorted target column by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import LossBreakdown, global_cost, regularizer_values
from .model import ActivationTrace, FrozenModel, forward_with_hooks, precompute_targets
from .tensor import Tensor, UsageError
from .transport import AffineMap, Support, TransportStack, identity_stack, support, with_strength

BASELINE_KINDS = ("mean_shift", "sequential_affine")


def _target_trace(model, target) -> ActivationTrace:
    return target if isinstance(target, ActivationTrace) else precompute_targets(model, target)


def fit_mean_shift(model: FrozenModel, source_samples, target) -> TransportStack:
    """Shift every hook by the difference of clean activation means."""
    source = np.asarray(source_samples, dtype=np.float64)
    tgt = _target_trace(model, target)
    if source.shape[0] == 0 or tgt.rows == 0:
        raise UsageError("mean shift needs non-empty sample sets")
    _, src = forward_with_hooks(model, None, Tensor(source))
    maps = []
    for u, v in zip(src.layers, tgt.layers):
        shift = v.data.mean(axis=0) - u.data.mean(axis=0)
        maps.append(AffineMap(np.ones(u.cols), shift))
    return TransportStack(tuple(maps))


def affine_fit_sorted(u: np.ndarray, v: np.ndarray, method: str = "order_stats") -> AffineMap:
    """Per-column affine map taking the samples ``u`` onto ``v`` in distribution.

    ``order_stats``: least squares between sorted columns, which minimizes the
    empirical W2^2 over affine maps with non-negative slope.  ``moments``:
    match mean and standard deviation.  Zero-variance source columns get
    slope 1 and the mean difference.
    """
    us = np.sort(u, axis=0)
    vs = np.sort(v, axis=0)
    mu_u, mu_v = us.mean(axis=0), vs.mean(axis=0)
    uc, vc = us - mu_u, vs - mu_v
    var_u = (uc * uc).mean(axis=0)
    if method == "order_stats":
        cov = (uc * vc).mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            omega = np.where(var_u > 0, cov / var_u, 1.0)
    elif method == "moments":
        var_v = (vc * vc).mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            omega = np.where(var_u > 0, np.sqrt(var_v / var_u), 1.0)
    else:
        raise UsageError(f"unknown affine fit method {method!r}")
    bias = mu_v - omega * mu_u
    return AffineMap(omega, bias)


def fit_sequential_affine(model: FrozenModel, source_samples, target, method: str = "order_stats") -> TransportStack:
    """Fit hooks in order, re-running the source through the maps fitted so far."""
    source = np.asarray(source_samples, dtype=np.float64)
    tgt = _target_trace(model, target)
    if source.shape[0] < 2 or tgt.rows < 2:
        raise UsageError("sequential affine fit needs at least 2 samples per side")
    if source.shape[0] != tgt.rows:
        raise UsageError(f"sequential affine fit needs equal sample counts, got {source.shape[0]} and {tgt.rows}")
    fitted = list(identity_stack(model.hook_dims).maps)
    x = Tensor(source)
    for k in range(len(model.hooks)):
        _, trace = forward_with_hooks(model, TransportStack(tuple(fitted)), x)
        # the trace at hook k already includes the (identity) map k
        fitted[k] = affine_fit_sorted(trace.layers[k].data, tgt.layers[k].data, method)
    return TransportStack(tuple(fitted))


def fit_baseline(kind: str, model: FrozenModel, source_samples, target, **kw) -> TransportStack:
    if kind == "mean_shift":
        return fit_mean_shift(model, source_samples, target)
    if kind == "sequential_affine":
        return fit_sequential_affine(model, source_samples, target, **kw)
    raise UsageError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")


@dataclass
class EvalResult:
    loss: LossBreakdown
    support: Support

    def to_dict(self) -> dict:
        return {
            **self.loss.to_dict(),
            "support": self.support.total,
            "support_per_hook": list(self.support.per_hook),
            "support_literal_sum": self.support.literal_sum,
        }


def evaluate(
    stack: TransportStack | None,
    model: FrozenModel,
    heldout_source,
    heldout_target,
    strength: float = 1.0,
    gamma: float = 0.0,
) -> EvalResult:
    """Global cost of ``stack`` (blended at ``strength``) on held-out data.

    The same code path scores trained stacks and baselines; ``None`` means
    no intervention.
    """
    stack = identity_stack(model.hook_dims) if stack is None else stack
    tgt = _target_trace(model, heldout_target)
    source = np.asarray(heldout_source, dtype=np.float64)
    n = min(source.shape[0], tgt.rows)
    if source.shape[0] != tgt.rows:
        source = source[:n]
        tgt = tgt.take_rows(slice(0, n))
    _, trace = forward_with_hooks(model, with_strength(stack, strength), Tensor(source))
    cost = global_cost(trace, tgt)
    cost.graph = None
    cost.reg_l1, cost.reg_group = regularizer_values(stack)
    cost.objective = cost.total_cost + gamma * (cost.reg_l1 + cost.reg_group)
    return EvalResult(cost, support(stack))
