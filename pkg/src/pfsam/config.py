"""Strict JSON run and study configuration.

Unknown keys anywhere are rejected so that a misspelled hyperparameter fails
loudly instead of silently falling back to its default. Schedule lengths are
given in optimizer steps; the total step count is derived from the data size,
``epochs`` and ``batch_size`` at training time.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SpuriousConfig
from .model import ModelConfig
from .objectives import LossKind, OBFParams
from .perturb import PerturbationSpec


class ConfigError(ValueError):
    """Schema or consistency problem in a configuration file."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    hidden_dims: list[int] = Field(default_factory=lambda: [32])
    activation: Literal["relu", "sigmoid"] = "relu"
    head_bias_init: float = 0.0

    @model_validator(mode="after")
    def _positive(self):
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims entries must be positive")
        return self


class LossSection(_Strict):
    name: Literal["ce", "sigmoid_ce", "ce_label_smooth"] = "ce"
    label_smoothing: float = Field(0.0, ge=0.0, lt=1.0)

    def build(self) -> LossKind:
        return LossKind(self.name, self.label_smoothing)


class ScheduleSection(_Strict):
    """Peak value, final value and warmup length in steps; min == max is constant."""

    max: float = Field(ge=0.0)
    min: float = Field(0.0, ge=0.0)
    warmup_steps: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.min > self.max:
            raise ValueError("schedule min exceeds max")
        return self


class GSAMSection(_Strict):
    xi: float = 0.0
    norm_backup: bool = False


class OptimizerSection(_Strict):
    kind: Literal["sgd_momentum", "adamw"] = "sgd_momentum"
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    lr: ScheduleSection = Field(default_factory=lambda: ScheduleSection(max=0.05, min=0.0))
    weight_decay: float = Field(0.0, ge=0.0)
    clip_norm: Optional[float] = Field(None, gt=0.0)
    rho_schedule: Optional[ScheduleSection] = None
    gsam: Optional[GSAMSection] = None
    shrink_perturb: Optional[float] = Field(None, ge=0.0, le=1.0)


class OBFSection(_Strict):
    gamma: float = Field(1.0, ge=0.0, le=1.0)
    lam: Optional[float] = Field(None, ge=0.0, lt=1.0)


class PerturbationSection(_Strict):
    kind: Literal["none", "steepest", "obf", "random"] = "steepest"
    rho: float = Field(0.1, ge=0.0)
    m: Optional[int] = Field(None, ge=1)
    obf: OBFSection = Field(default_factory=OBFSection)
    asam: Literal["off", "standard", "fixed_norm"] = "off"
    seed: Optional[int] = Field(None, ge=0)  # None: the run seed

    def build(self, run_seed: int) -> PerturbationSpec:
        return PerturbationSpec(
            kind=self.kind,
            rho=self.rho,
            m=self.m,
            obf=OBFParams(self.obf.gamma, self.obf.lam),
            asam=self.asam,
            seed=run_seed if self.seed is None else self.seed,
        )


class SpuriousSection(_Strict):
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(2000, ge=1)
    core_dim: int = Field(8, ge=1)
    spurious_dim: int = Field(8, ge=1)
    margin: float = Field(1.0, gt=0.0)
    q: float = Field(0.95, ge=0.5, le=1.0)
    noise: float = Field(0.7, ge=0.0)

    def build(self) -> SpuriousConfig:
        return SpuriousConfig(**self.model_dump())


class GaussianSection(_Strict):
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(2000, ge=1)
    dim: int = Field(8, ge=2)
    num_classes: int = Field(4, ge=2)
    separation: float = Field(2.0, ge=0.0)
    noise: float = Field(1.0, ge=0.0)


class DataSection(_Strict):
    source: Literal["spurious", "gaussians", "delimited"] = "spurious"
    spurious: SpuriousSection = Field(default_factory=SpuriousSection)
    gaussians: GaussianSection = Field(default_factory=GaussianSection)
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    label_column: Union[int, str] = -1
    num_classes: Optional[int] = Field(None, ge=2)
    standardize: bool = True
    seed: Optional[int] = Field(None, ge=0)  # None: the run seed

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "delimited" and (self.train_path is None or self.test_path is None):
            raise ValueError("delimited data needs train_path and test_path")
        return self


class RunConfig(_Strict):
    model: ModelSection = Field(default_factory=ModelSection)
    loss: LossSection = Field(default_factory=LossSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    perturbation: PerturbationSection = Field(default_factory=PerturbationSection)
    data: DataSection = Field(default_factory=DataSection)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(100, ge=1)
    snapshot_every: int = Field(25, ge=1)  # epochs
    snapshot_ensemble: int = Field(8, ge=1)
    log_every: int = Field(50, ge=1)  # steps
    seed: int = Field(0, ge=0)
    out: str = "runs/default"

    @model_validator(mode="after")
    def _consistent(self):
        p = self.perturbation
        if p.m is not None and p.m > self.batch_size:
            raise ValueError(f"perturbation.m = {p.m} exceeds batch_size = {self.batch_size}")
        if p.kind == "obf" and self.optimizer.rho_schedule is not None:
            raise ValueError("the obf perturbation uses a constant rho; drop optimizer.rho_schedule")
        return self

    def model_config_for(self, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(input_dim, num_classes, tuple(self.model.hidden_dims),
                           self.model.activation, self.model.head_bias_init)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None) -> "RunConfig":
        update = {}
        if seed is not None:
            update["seed"] = seed
        if out is not None:
            update["out"] = str(out)
        return self.model_copy(update=update) if update else self


class StudyConfig(_Strict):
    """A pool of runs: every (kind, m, seed) combination on a shared base config."""

    base: RunConfig = Field(default_factory=RunConfig)
    kinds: list[Literal["none", "steepest", "obf", "random"]] = Field(
        default_factory=lambda: ["steepest", "obf", "random"])
    m_values: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 32])
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    rho_by_kind: dict[str, float] = Field(default_factory=dict)
    n_perm: int = Field(10000, ge=1)
    sharpness_samples: int = Field(256, ge=1)
    sharpness_max_iters: int = Field(100, ge=1)
    workers: int = Field(1, ge=1)
    out: str = "runs/sweep"

    @model_validator(mode="after")
    def _consistent(self):
        if not self.kinds or not self.m_values or not self.seeds:
            raise ValueError("kinds, m_values and seeds must be non-empty")
        if any(m < 1 or m > self.base.batch_size for m in self.m_values):
            raise ValueError(f"m_values must lie in [1, batch_size = {self.base.batch_size}]")
        unknown = set(self.rho_by_kind) - {"none", "steepest", "obf", "random"}
        if unknown:
            raise ValueError(f"rho_by_kind has unknown kinds {sorted(unknown)}")
        if any(r < 0 for r in self.rho_by_kind.values()):
            raise ValueError("rho_by_kind values must be non-negative")
        return self

    def member(self, kind: str, m: int, seed: int, out: str) -> RunConfig:
        pert = self.base.perturbation.model_copy(
            update={"kind": kind, "m": m, "rho": self.rho_by_kind.get(kind, self.base.perturbation.rho)})
        cfg = self.base.model_copy(update={"perturbation": pert, "seed": seed, "out": out})
        # re-run validation on the combined config
        return RunConfig.model_validate(cfg.model_dump())


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {where}: {err['msg']}")
    return "\n".join(lines)


def parse(kind, obj):
    try:
        return kind.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(f"invalid {kind.__name__}:\n{_describe(exc)}") from None


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None


def load_run_config(path) -> RunConfig:
    return parse(RunConfig, load_json(path))


def load_study_config(path) -> StudyConfig:
    return parse(StudyConfig, load_json(path))
