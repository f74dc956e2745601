"""Sharpness-aware optimizers with perturbation-based forgetting measurements."""

from .model import ModelConfig, ParameterVector
from .objectives import LossKind, OBFParams
from .optim import GSAMConfig, OptimizerState, ScheduleSpec, StepConfig, gsam_step, sam_step
from .perturb import PerturbationSpec, Task, msam_gradient

__version__ = "0.1.0"

__all__ = [
    "GSAMConfig", "LossKind", "ModelConfig", "OBFParams", "OptimizerState", "ParameterVector",
    "PerturbationSpec", "ScheduleSpec", "StepConfig", "Task", "gsam_step", "msam_gradient",
    "sam_step",
]
