"""Correlating forgetting and sharpness with accuracy across a pool of models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..io import atomic_write_csv
from .information import MICurve
from .rank import tau_with_p
from .thresholds import AdjustedCurves, ForgettingScores

CORRELATION_COLUMNS = [
    "level", "tau_forget", "p_forget", "tau_target", "p_target", "tau_sharpness", "p_sharpness",
    "tau_forget_avg", "p_forget_avg", "tau_target_avg", "p_target_avg",
]


@dataclass
class CorrelationResult:
    levels: np.ndarray
    tau_forget: np.ndarray
    p_forget: np.ndarray
    tau_target: np.ndarray
    p_target: np.ndarray
    tau_sharpness: float
    p_sharpness: float
    # the same statistics on per-model values averaged over all levels
    tau_forget_avg: float
    p_forget_avg: float
    tau_target_avg: float
    p_target_avg: float

    def rows(self):
        for j, level in enumerate(self.levels):
            yield [level, self.tau_forget[j], self.p_forget[j], self.tau_target[j], self.p_target[j],
                   self.tau_sharpness, self.p_sharpness, self.tau_forget_avg, self.p_forget_avg,
                   self.tau_target_avg, self.p_target_avg]


def correlate_pool(delta_forget, delta_target, sharpness, accuracy, levels=None,
                   n_perm: int = 10000, seed: int = 0) -> CorrelationResult:
    """Kendall tau (and permutation p) of each per-model metric against accuracy.

    ``delta_forget`` and ``delta_target`` are (models, levels) arrays already
    averaged over epochs per model.
    """
    forget = np.atleast_2d(np.asarray(delta_forget, dtype=np.float64))
    target = np.atleast_2d(np.asarray(delta_target, dtype=np.float64))
    acc = np.asarray(accuracy, dtype=np.float64)
    J = forget.shape[1]
    levels = np.linspace(0.0, 1.0, J) if levels is None else np.asarray(levels)
    tf, pf, tt, pt = (np.empty(J) for _ in range(4))
    for j in range(J):
        tf[j], pf[j] = tau_with_p(forget[:, j], acc, n_perm, seed)
        tt[j], pt[j] = tau_with_p(target[:, j], acc, n_perm, seed)
    ts, ps = tau_with_p(np.asarray(sharpness, dtype=np.float64), acc, n_perm, seed)
    tfa, pfa = tau_with_p(forget.mean(axis=1), acc, n_perm, seed)
    tta, pta = tau_with_p(target.mean(axis=1), acc, n_perm, seed)
    return CorrelationResult(levels, tf, pf, tt, pt, ts, ps, tfa, pfa, tta, pta)


def write_correlation_csv(result: CorrelationResult, path) -> None:
    atomic_write_csv(path, CORRELATION_COLUMNS, result.rows())


def write_plot_data_csv(result: CorrelationResult, path, alpha: float = 0.05) -> None:
    """Per-level curves plus significance masks, one file per perturbation kind."""
    rows = []
    for j, level in enumerate(result.levels):
        rows.append([level, result.tau_forget[j], int(result.p_forget[j] <= alpha),
                     result.tau_target[j], int(result.p_target[j] <= alpha),
                     result.tau_sharpness, int(result.p_sharpness <= alpha)])
    atomic_write_csv(path, ["level", "tau_forget", "forget_significant", "tau_target",
                            "target_significant", "tau_sharpness", "sharpness_significant"], rows)


def write_mi_curve_csv(unperturbed: MICurve, perturbed: MICurve, path) -> None:
    rows = zip(unperturbed.thresholds, unperturbed.i_x_yhat_given_y, perturbed.i_x_yhat_given_y,
               unperturbed.i_yhat_y, perturbed.i_yhat_y)
    atomic_write_csv(path, ["threshold", "cond_mi", "cond_mi_perturbed", "target_mi",
                            "target_mi_perturbed"], rows)


def write_adjusted_csv(adj: AdjustedCurves, path) -> None:
    rows = zip(adj.levels, adj.thresholds, adj.cond_unperturbed, adj.cond_perturbed,
               adj.target_unperturbed, adj.target_perturbed, adj.reached.astype(int))
    atomic_write_csv(path, ["level", "threshold", "cond_mi", "cond_mi_perturbed", "target_mi",
                            "target_mi_perturbed", "reached"], rows)


def write_forgetting_csv(scores: ForgettingScores, path) -> None:
    rows = [[lv, f, t] for lv, f, t in zip(scores.levels, scores.delta_forget, scores.delta_target)]
    rows.append(["mean", scores.mean_forget, scores.mean_target])
    atomic_write_csv(path, ["level", "delta_forget", "delta_target"], rows)
