"""Adjusted binning thresholds and forgetting scores.

Curves are normalized so the unperturbed I(X; Yhat | Y) peaks at 1. On the
branch at and above the peak threshold, a grid of adjusted levels s in [0, 1]
is mapped to the raw threshold where the normalized curve equals 1 - s, and
every curve is resampled there. Plug-in noise can make that branch slightly
non-monotone; each level uses the first crossing, which keeps the grid
non-decreasing and the resampled unperturbed curve exactly at 1 - s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .information import MICurve, SnapshotCurves

NUM_LEVELS = 100


class EmptyGridError(ValueError):
    """The unperturbed curve has no positive maximum to normalize by."""


@dataclass
class AdjustedCurves:
    levels: np.ndarray
    thresholds: np.ndarray
    cond_unperturbed: np.ndarray  # normalized; equals 1 - level where reached
    cond_perturbed: np.ndarray  # normalized by the same constant
    target_unperturbed: np.ndarray  # bits
    target_perturbed: np.ndarray  # bits
    scale: float
    reached: np.ndarray  # False where the branch never falls to 1 - level


def invert_decreasing(thresholds, values, targets) -> tuple[np.ndarray, np.ndarray]:
    """Raw thresholds where piecewise-linear ``values`` first fall to each target.

    ``thresholds`` is increasing and ``values[0]`` is the maximum. Returns the
    thresholds (clamped to the last one when a target lies below the curve) and
    a reached mask.
    """
    t = np.asarray(thresholds, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    out = np.empty(len(targets))
    reached = np.ones(len(targets), dtype=bool)
    for i, target in enumerate(targets):
        hits = np.nonzero(v <= target)[0]
        if hits.size == 0:
            out[i] = t[-1]
            reached[i] = False
            continue
        j = hits[0]
        if j == 0 or v[j] == target:
            out[i] = t[j]
            continue
        hi, lo = v[j - 1], v[j]
        out[i] = t[j - 1] + (hi - target) / (hi - lo) * (t[j] - t[j - 1])
    return out, reached


def adjust_thresholds(unperturbed: MICurve, perturbed: MICurve | None = None,
                      levels: int = NUM_LEVELS) -> AdjustedCurves:
    t = np.asarray(unperturbed.thresholds, dtype=np.float64)
    cond = np.asarray(unperturbed.i_x_yhat_given_y, dtype=np.float64)
    scale = float(cond.max()) if cond.size else 0.0
    if not scale > 0:
        raise EmptyGridError("unperturbed conditional MI curve has no positive maximum")
    peak = int(np.argmax(cond))
    branch_t = t[peak:]
    branch = cond[peak:] / scale
    s = np.linspace(0.0, 1.0, levels)
    grid, reached = invert_decreasing(branch_t, branch, 1.0 - s)
    resampled = np.interp(grid, t, cond / scale)
    if perturbed is None:
        perturbed = unperturbed
    cond_p = np.interp(grid, t, np.asarray(perturbed.i_x_yhat_given_y) / scale)
    return AdjustedCurves(
        levels=s,
        thresholds=grid,
        cond_unperturbed=resampled,
        cond_perturbed=cond_p,
        target_unperturbed=np.interp(grid, t, unperturbed.i_yhat_y),
        target_perturbed=np.interp(grid, t, perturbed.i_yhat_y),
        scale=scale,
        reached=reached,
    )


def adjust_snapshot(curves: SnapshotCurves, levels: int = NUM_LEVELS) -> AdjustedCurves:
    return adjust_thresholds(curves.unperturbed, curves.perturbed, levels)


@dataclass
class ForgettingScores:
    levels: np.ndarray
    delta_forget: np.ndarray
    delta_target: np.ndarray

    @property
    def mean_forget(self) -> float:
        return float(np.mean(self.delta_forget))

    @property
    def mean_target(self) -> float:
        return float(np.mean(self.delta_target))


def forgetting_scores(adjusted: AdjustedCurves) -> ForgettingScores:
    """Per-level I(X;Yhat|Y) - I(X;Yhat^p|Y) and I(Yhat;Y) - I(Yhat^p;Y)."""
    arrays = (adjusted.cond_unperturbed, adjusted.cond_perturbed, adjusted.target_unperturbed,
              adjusted.target_perturbed)
    if any(np.shape(a) != np.shape(adjusted.levels) for a in arrays):
        raise ValueError("curves are not on the same adjusted grid")
    return ForgettingScores(
        levels=adjusted.levels.copy(),
        delta_forget=adjusted.cond_unperturbed - adjusted.cond_perturbed,
        delta_target=adjusted.target_unperturbed - adjusted.target_perturbed,
    )
