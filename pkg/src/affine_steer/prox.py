"""Proximal operators of the l1 norm, the l2 norm and their sum."""

from __future__ import annotations

import numpy as np

from .tensor import UsageError


def soft_threshold(z, tau: float) -> np.ndarray:
    """``sign(z) * max(|z| - tau, 0)``; entries with ``|z_i| <= tau`` become exactly 0."""
    if tau < 0:
        raise UsageError(f"threshold must be non-negative, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    if tau == 0:
        return z.copy()
    return np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)


def group_prox(z, tau: float) -> np.ndarray:
    """Block shrinkage ``(1 - tau / ||z||_2)_+ * z``.

    The whole vector is exactly 0 once ``||z||_2 <= tau``.
    """
    if tau < 0:
        raise UsageError(f"threshold must be non-negative, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    if tau == 0:
        return z.copy()
    norm = float(np.linalg.norm(z))
    if norm <= tau:
        return np.zeros_like(z)
    return (1.0 - tau / norm) * z


def sparse_group_prox(z, tau1: float, tau_group: float) -> np.ndarray:
    """Prox of ``tau1 * ||x||_1 + tau_group * ||x||_2``: soft-threshold, then shrink the group."""
    return group_prox(soft_threshold(z, tau1), tau_group)
