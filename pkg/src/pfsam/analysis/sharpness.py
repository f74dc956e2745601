"""Dominant Hessian eigenvalue by power iteration on exact Hessian-vector products."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..diffengine import hvp


@dataclass
class SharpnessResult:
    eigenvalue: float
    iterations: int
    converged: bool
    degenerate: bool = False


def power_iteration(matvec: Callable[[np.ndarray], np.ndarray], dim: int, max_iters: int = 100,
                    rel_tol: float = 1e-4, seed: int = 0) -> SharpnessResult:
    """Largest-magnitude eigenvalue of a symmetric operator, signed via the Rayleigh quotient.

    Stops once the Rayleigh quotient changes by less than ``rel_tol`` relative,
    or the eigen-residual ||Av - lambda v|| drops below ``rel_tol * |lambda|``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    prev = None
    lam = 0.0
    for it in range(1, max_iters + 1):
        hv = matvec(v)
        norm = float(np.linalg.norm(hv))
        if norm < 1e-14:
            return SharpnessResult(0.0, it, False, True)
        lam = float(v @ hv)
        residual = float(np.linalg.norm(hv - lam * v))
        done = residual <= rel_tol * abs(lam)
        if prev is not None and abs(lam - prev) < rel_tol * abs(lam):
            done = True
        if done:
            return SharpnessResult(lam, it, True)
        prev = lam
        v = hv / norm
    return SharpnessResult(lam, max_iters, False)


def power_iteration_sharpness(loss_builder, params, max_iters: int = 100, rel_tol: float = 1e-4,
                              seed: int = 0) -> SharpnessResult:
    theta = np.asarray(params, dtype=np.float64)
    return power_iteration(lambda v: hvp(loss_builder, theta, v), theta.size, max_iters, rel_tol, seed)


def model_sharpness(task, params, X, y, max_iters: int = 100, rel_tol: float = 1e-4,
                    seed: int = 0) -> SharpnessResult:
    """Sharpness of ``task``'s loss on the batch (X, y)."""
    return power_iteration_sharpness(task.loss_builder(X, y), params, max_iters, rel_tol, seed)
