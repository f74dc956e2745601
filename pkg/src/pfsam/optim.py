"""Base optimizers and SAM/GSAM step composition."""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ParameterVector
from .perturb import PerturbationSpec, Task, msam


@dataclass(frozen=True)
class ScheduleSpec:
    """Linear warmup to ``max`` then linear decay to ``min`` at ``total_steps``."""

    max: float
    min: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.min > self.max:
            raise ValueError("schedule min exceeds max")

    @classmethod
    def constant(cls, value: float, total_steps: int = 1) -> "ScheduleSpec":
        return cls(max=value, min=value, warmup_steps=0, total_steps=total_steps)


def schedule_value(s: ScheduleSpec, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.max * step / s.warmup_steps
    if s.max == s.min:
        return s.max
    span = s.total_steps - s.warmup_steps
    if span == 0:
        return s.max
    frac = (step - s.warmup_steps) / span
    return s.max + (s.min - s.max) * frac


def clip_global_norm(g, c: float) -> np.ndarray:
    if c <= 0:
        raise ValueError("clip norm must be positive")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm > c:
        return c * (g / norm)
    return g


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    buffers: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def to_dict(self) -> dict:
        bufs = {
            k: base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode("ascii")
            for k, v in sorted(self.buffers.items())
        }
        return {
            "kind": self.kind,
            "momentum": self.momentum,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "buffers": bufs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        bufs = {k: np.frombuffer(base64.b64decode(v), dtype="<f8").astype(np.float64) for k, v in d["buffers"].items()}
        return cls(d["kind"], d["momentum"], d["beta1"], d["beta2"], d["eps"], bufs, d["step_count"])


def base_step(state: OptimizerState, params, g, lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """One optimizer update with decoupled weight decay. Mutates ``state``."""
    theta = np.asarray(params, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape:
        raise ValueError(f"gradient {g.shape} vs params {theta.shape}")
    state.step_count += 1
    if state.kind == "sgd_momentum":
        v = state.buffers.get("momentum")
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers["momentum"] = v
        update = lr * v
    else:
        t = state.step_count
        m = state.buffers.get("m", np.zeros_like(theta))
        v = state.buffers.get("v", np.zeros_like(theta))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.buffers["m"], state.buffers["v"] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = theta - update
    if weight_decay:
        new = new - lr * weight_decay * theta
    return new


@dataclass(frozen=True)
class GSAMConfig:
    xi: float = 0.0
    norm_backup: bool = False


@dataclass(frozen=True)
class StepConfig:
    lr_schedule: ScheduleSpec
    rho_schedule: Optional[ScheduleSpec] = None  # None: constant spec.rho
    weight_decay: float = 0.0
    clip_norm: Optional[float] = None
    gsam: Optional[GSAMConfig] = None
    shrink_perturb: Optional[float] = None

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.shrink_perturb is not None and not 0 <= self.shrink_perturb <= 1:
            raise ValueError("shrink_perturb factor must lie in [0, 1]")


@dataclass
class StepInfo:
    lr: float
    rho: float
    grad_norm: float
    degenerate: int
    gsam_fallback: bool = False


def decompose(g_pert, g_sam) -> tuple[np.ndarray, np.ndarray]:
    """Split ``g_pert`` into parts parallel and orthogonal to ``g_sam``."""
    g_pert = np.asarray(g_pert, dtype=np.float64)
    g_sam = np.asarray(g_sam, dtype=np.float64)
    denom = float(g_sam @ g_sam)
    parallel = (float(g_pert @ g_sam) / denom) * g_sam
    return parallel, g_pert - parallel


def gsam_direction(g_pert, g_sam, xi: float, norm_backup: bool = False) -> tuple[np.ndarray, bool]:
    """g_sam - xi * (component of g_pert orthogonal to g_sam). Second value flags fallback."""
    g_pert = np.asarray(g_pert, dtype=np.float64)
    g_sam = np.asarray(g_sam, dtype=np.float64)
    if np.linalg.norm(g_sam) < 1e-12:
        return g_sam, True
    if norm_backup:
        norm = np.linalg.norm(g_pert)
        if norm > 0:
            g_pert = g_pert / norm
    _, ortho = decompose(g_pert, g_sam)
    return g_sam - xi * ortho, False


def _current_rho(spec: PerturbationSpec, cfg: StepConfig, step: int) -> float:
    if cfg.rho_schedule is None:
        return spec.rho
    return schedule_value(cfg.rho_schedule, min(step, cfg.rho_schedule.total_steps))


def _finish(state, theta, g, cfg, lr, init_params):
    if cfg.clip_norm is not None:
        g = clip_global_norm(g, cfg.clip_norm)
    new = base_step(state, theta, g, lr, cfg.weight_decay)
    if cfg.shrink_perturb is not None:
        new = shrink_perturb(new, init_params, cfg.shrink_perturb)
    return new, g


def sam_step(task: Task, params, batch, spec: PerturbationSpec, cfg: StepConfig, state: OptimizerState,
             init_params=None, info: Optional[list] = None):
    """Perturbed gradient from m-SAM applied at the unperturbed weights.

    Dispatches to :func:`gsam_step` when ``cfg.gsam`` is set. Returns new
    parameters with the same type as ``params``.
    """
    if cfg.gsam is not None:
        return gsam_step(task, params, batch, spec, cfg, state, init_params, info)
    step = state.step_count
    lr = schedule_value(cfg.lr_schedule, step)
    rho = _current_rho(spec, cfg, step)
    out = msam(task, params, batch, spec, rho, step)
    theta = np.asarray(params, dtype=np.float64)
    new, g = _finish(state, theta, out.sam_grad, cfg, lr, init_params)
    if info is not None:
        info.append(StepInfo(lr, rho, float(np.linalg.norm(out.sam_grad)), out.degenerate))
    return _like(params, new)


def gsam_step(task: Task, params, batch, spec: PerturbationSpec, cfg: StepConfig, state: OptimizerState,
              init_params=None, info: Optional[list] = None):
    if cfg.gsam is None:
        raise ValueError("gsam_step needs cfg.gsam")
    step = state.step_count
    lr = schedule_value(cfg.lr_schedule, step)
    rho = _current_rho(spec, cfg, step)
    out = msam(task, params, batch, spec, rho, step, need_pert=True)
    direction, fallback = gsam_direction(out.pert_grad, out.sam_grad, cfg.gsam.xi, cfg.gsam.norm_backup)
    theta = np.asarray(params, dtype=np.float64)
    new, g = _finish(state, theta, direction, cfg, lr, init_params)
    if info is not None:
        info.append(StepInfo(lr, rho, float(np.linalg.norm(direction)), out.degenerate, fallback))
    return _like(params, new)


def shrink_perturb(params, init_params, beta: float):
    """Interpolate toward the initialization: (1 - beta) theta + beta theta0."""
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    theta = np.asarray(params, dtype=np.float64)
    if beta == 0:
        return _like(params, theta.copy())
    if beta == 1:
        return _like(params, np.array(init_params, dtype=np.float64))
    return _like(params, (1 - beta) * theta + beta * np.asarray(init_params, dtype=np.float64))


def _like(params, values):
    if isinstance(params, ParameterVector):
        return params.with_values(values)
    return values
