"""Forgetting and sharpness measurements."""

from .correlation import CorrelationResult, correlate_pool
from .information import (
    MICurve,
    SnapshotCurves,
    bin_outputs,
    conditional_mi,
    default_thresholds,
    mi_curve,
    target_mi,
)
from .rank import UndefinedCorrelation, kendall_tau, permutation_p
from .sharpness import SharpnessResult, model_sharpness, power_iteration, power_iteration_sharpness
from .snapshot import OutputSnapshot, SnapshotFormatError, load_snapshot, save_snapshot
from .thresholds import (
    AdjustedCurves,
    EmptyGridError,
    ForgettingScores,
    adjust_snapshot,
    adjust_thresholds,
    forgetting_scores,
)

__all__ = [
    "AdjustedCurves", "CorrelationResult", "EmptyGridError", "ForgettingScores", "MICurve",
    "OutputSnapshot", "SharpnessResult", "SnapshotCurves", "SnapshotFormatError",
    "UndefinedCorrelation", "adjust_snapshot", "adjust_thresholds", "bin_outputs",
    "conditional_mi", "correlate_pool", "default_thresholds", "forgetting_scores", "kendall_tau",
    "load_snapshot", "mi_curve", "model_sharpness", "permutation_p", "power_iteration",
    "power_iteration_sharpness", "save_snapshot", "target_mi",
]
