"""Kendall tau-b and a permutation test for it."""

from __future__ import annotations

import math

import numpy as np


class UndefinedCorrelation(ValueError):
    """One of the inputs is constant, so tau-b has a zero denominator."""


def _signs(v: np.ndarray) -> np.ndarray:
    return np.sign(v[:, None] - v[None, :])


def _tied_pairs(v: np.ndarray) -> int:
    _, counts = np.unique(v, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _prepare(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("kendall_tau needs two 1-d sequences of equal length")
    k = x.size
    if k < 2:
        raise ValueError("kendall_tau needs at least two observations")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)):
        raise ValueError("kendall_tau inputs must be finite")
    pairs = k * (k - 1) // 2
    tx, ty = _tied_pairs(x), _tied_pairs(y)
    if tx == pairs or ty == pairs:
        raise UndefinedCorrelation("all values tied in one input")
    return x, y, pairs, tx, ty


def _score(sx: np.ndarray, y: np.ndarray) -> int:
    # sum over i<j of sign(x_i - x_j) sign(y_i - y_j); full matrix counts each pair twice
    return int(round(float((sx * _signs(y)).sum()))) // 2


def kendall_tau(x, y) -> float:
    """Kendall tau-b with tie corrections."""
    x, y, pairs, tx, ty = _prepare(x, y)
    s = _score(_signs(x), y)
    return s / math.sqrt((pairs - tx) * (pairs - ty))


def permutation_p(x, y, n_perm: int = 10000, seed: int = 0) -> float:
    """Two-sided permutation p-value (1 + #{|tau_perm| >= |tau|}) / (n_perm + 1)."""
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    x, y, _, _, _ = _prepare(x, y)
    k = x.size
    sx = _signs(x)
    observed = abs(_score(sx, y))
    rng = np.random.default_rng(seed)
    # the tau-b denominator is permutation invariant, so compare integer scores
    chunk = max(1, 4_000_000 // (k * k))
    hits = 0
    done = 0
    while done < n_perm:
        b = min(chunk, n_perm - done)
        perm = rng.permuted(np.tile(np.arange(k), (b, 1)), axis=1)
        yp = y[perm]
        sy = np.sign(yp[:, :, None] - yp[:, None, :])
        scores = np.einsum("ij,bij->b", sx, sy) / 2
        hits += int(np.count_nonzero(np.abs(np.rint(scores)) >= observed))
        done += b
    return (1 + hits) / (n_perm + 1)


def tau_with_p(x, y, n_perm: int = 10000, seed: int = 0) -> tuple[float, float]:
    """(tau, p); both NaN when tau is undefined."""
    try:
        return kendall_tau(x, y), permutation_p(x, y, n_perm, seed)
    except UndefinedCorrelation:
        return math.nan, math.nan
