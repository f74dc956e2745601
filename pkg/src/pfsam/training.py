"""Training runs: the epoch loop, metrics, checkpoints and output snapshots."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffengine as de
from . import model as mdl
from .analysis.snapshot import OutputSnapshot, save_snapshot
from .config import RunConfig
from .data import Dataset, batch_iter, gen_gaussians, gen_spurious, load_delimited, standardize
from .io import atomic_write_csv, atomic_write_json
from .objectives import task_loss
from .optim import GSAMConfig, OptimizerState, ScheduleSpec, StepConfig, _current_rho, sam_step
from .perturb import PerturbationSpec, Task, perturb

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "epoch", "train_loss", "eval_accuracy", "lr", "rho", "grad_norm",
                  "degenerate_count"]
SENTINEL = "nan"


class NumericAbort(RuntimeError):
    """Training hit a non-finite value; the last good checkpoint is kept on disk."""

    def __init__(self, step: int, checkpoint: Path, reason: str):
        super().__init__(f"non-finite value at step {step} ({reason}); last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class RunResult:
    out: Path
    params: mdl.ParameterVector
    train_accuracy: float
    test_accuracy: float
    steps: int


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    seed = cfg.seed if d.seed is None else d.seed
    if d.source == "spurious":
        train, test = gen_spurious(d.spurious.build(), seed)
    elif d.source == "gaussians":
        g = d.gaussians
        # one draw split in two keeps both splits on the same class means
        full = gen_gaussians(g.n_train + g.n_test, g.dim, g.num_classes, g.separation, seed, g.noise)
        train = Dataset(full.X[:g.n_train], full.y[:g.n_train], "train", g.num_classes)
        test = Dataset(full.X[g.n_train:], full.y[g.n_train:], "test", g.num_classes)
    else:
        train = load_delimited(d.train_path, d.label_column, "train", d.num_classes)
        C = d.num_classes or train.num_classes
        test = load_delimited(d.test_path, d.label_column, "test", C)
        if test.num_classes > C:
            C = test.num_classes
            train = Dataset(train.X, train.y, "train", C)
        if train.dim != test.dim:
            raise ValueError(f"train has {train.dim} features, test has {test.dim}")
    if d.standardize:
        train, test = standardize(train, test)
    return train, test


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def build_step_config(cfg: RunConfig, total_steps: int) -> StepConfig:
    o = cfg.optimizer

    def schedule(s):
        if s.warmup_steps > total_steps:
            raise ValueError(f"warmup_steps {s.warmup_steps} exceeds the run's {total_steps} steps")
        return ScheduleSpec(s.max, s.min, s.warmup_steps, total_steps)

    return StepConfig(
        lr_schedule=schedule(o.lr),
        rho_schedule=None if o.rho_schedule is None else schedule(o.rho_schedule),
        weight_decay=o.weight_decay,
        clip_norm=o.clip_norm,
        gsam=None if o.gsam is None else GSAMConfig(o.gsam.xi, o.gsam.norm_backup),
        shrink_perturb=o.shrink_perturb,
    )


def new_optimizer_state(cfg: RunConfig) -> OptimizerState:
    o = cfg.optimizer
    return OptimizerState(o.kind, o.momentum, o.beta1, o.beta2, o.eps)


def batch_loss(task: Task, theta, X, y) -> float:
    graph = de.Graph()
    leaf = graph.leaf(np.asarray(theta))
    with graph.paused():
        return float(task_loss(task.loss, mdl.logits(task.model, leaf, X), y).value)


def collect_snapshot(task: Task, params, spec: PerturbationSpec, rho: float, train: Dataset,
                     evalset: Dataset, epoch: int, ensemble: int, batch_size: int) -> OutputSnapshot:
    """Likelihoods on ``evalset`` at theta and at ``ensemble`` perturbed copies theta + eps.

    Draw k perturbs on a seeded training microbatch of size m (the update batch
    size when m is unset), the same way an update step would.
    """
    theta = np.asarray(params, dtype=np.float64)
    head = task.loss.head
    m = batch_size if spec.m is None else spec.m
    m = min(m, len(train))
    base = mdl.likelihoods(task.model, theta, evalset.X, head)
    perturbed = []
    for k in range(ensemble):
        rng = np.random.default_rng([spec.seed, epoch, k, 1])
        idx = np.sort(rng.choice(len(train), size=m, replace=False))
        if spec.kind == "none" or rho == 0:
            eps = np.zeros_like(theta)
        else:
            res = perturb(task, theta, train.X[idx], train.y[idx], spec, rho,
                          int(rng.integers(2**63)))
            eps = res.eps
        perturbed.append(mdl.likelihoods(task.model, theta + eps, evalset.X, head))
    meta = {"m": spec.m, "kind": spec.kind, "seed": spec.seed, "rho": rho, "split": evalset.split}
    return OutputSnapshot(epoch, evalset.y, base, perturbed, meta, head)


def _row(step, epoch, loss, acc, lr, rho, gnorm, degenerate):
    def f(v):
        return SENTINEL if v is None or not math.isfinite(v) else float(v)

    return [int(step), int(epoch), f(loss), f(acc), f(lr), f(rho), f(gnorm), int(degenerate)]


def train(cfg: RunConfig, datasets: Optional[tuple[Dataset, Dataset]] = None) -> RunResult:
    """Run one configuration end to end and write its artifacts under ``cfg.out``.

    Layout: config.json, metrics.csv, checkpoints/epoch_NNNN.ckpt (initial and
    at every snapshot epoch), checkpoints/final.ckpt, snapshots/epoch_NNNN.snap
    and summary.json.
    """
    out = Path(cfg.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "config.json", cfg.model_dump(mode="json"))

    train_ds, test_ds = datasets if datasets is not None else load_datasets(cfg)
    model_cfg = cfg.model_config_for(train_ds.dim, train_ds.num_classes)
    task = Task(model_cfg, cfg.loss.build())
    spec = cfg.perturbation.build(cfg.seed)
    per_epoch = steps_per_epoch(len(train_ds), cfg.batch_size)
    total = cfg.epochs * per_epoch
    step_cfg = build_step_config(cfg, total)
    state = new_optimizer_state(cfg)
    params = mdl.init(model_cfg, cfg.seed)
    init_params = params.copy()

    def checkpoint(name, p, step, with_state=True):
        path = out / "checkpoints" / name
        mdl.save(mdl.Checkpoint(p, model_cfg, step, cfg.seed, state.to_dict() if with_state else None,
                                {"epoch": step // per_epoch if per_epoch else 0}), path)
        return path

    rows: list = []
    metrics_path = out / "metrics.csv"
    atomic_write_csv(metrics_path, METRIC_COLUMNS, rows)
    checkpoint("epoch_0000.ckpt", params, 0)

    step = 0
    degenerate_total = 0
    snapshots = []
    for epoch in range(1, cfg.epochs + 1):
        losses, degen, info = [], 0, []
        for X, y in batch_iter(train_ds, cfg.batch_size, cfg.seed, epoch - 1):
            try:
                # overflow is reported through NumericError, numpy's warnings add nothing
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = batch_loss(task, params, X, y)
                    if not math.isfinite(loss):
                        raise de.NumericError("training loss is not finite")
                    new = sam_step(task, params, (X, y), spec, step_cfg, state, init_params, info)
                if not np.all(np.isfinite(new.values)):
                    raise de.NumericError("parameters became non-finite")
            except de.NumericError as exc:
                atomic_write_csv(metrics_path, METRIC_COLUMNS, rows)
                # the optimizer buffers may already hold the bad update
                path = checkpoint("last_good.ckpt", params, step, with_state=False)
                raise NumericAbort(step, path, str(exc)) from exc
            params = new
            step += 1
            losses.append(loss)
            degen += info[-1].degenerate
            at_log = step % cfg.log_every == 0
            at_end = step == epoch * per_epoch
            if at_log or at_end:
                acc = mdl.accuracy(model_cfg, params, test_ds.X, test_ds.y) if at_end else None
                last = info[-1]
                rows.append(_row(step, epoch, float(np.mean(losses)), acc, last.lr, last.rho,
                                 last.grad_norm, degen))
                degenerate_total += degen
                losses, degen = [], 0
        atomic_write_csv(metrics_path, METRIC_COLUMNS, rows)
        if epoch % cfg.snapshot_every == 0:
            rho = _current_rho(spec, step_cfg, step)
            snap = collect_snapshot(task, params, spec, rho, train_ds, test_ds, epoch,
                                    cfg.snapshot_ensemble, cfg.batch_size)
            name = f"epoch_{epoch:04d}.snap"
            save_snapshot(snap, out / "snapshots" / name)
            snapshots.append(name)
            checkpoint(f"epoch_{epoch:04d}.ckpt", params, step)
        log.info("epoch %d/%d step %d", epoch, cfg.epochs, step)

    checkpoint("final.ckpt", params, step)
    train_acc = mdl.accuracy(model_cfg, params, train_ds.X, train_ds.y)
    test_acc = mdl.accuracy(model_cfg, params, test_ds.X, test_ds.y)
    atomic_write_json(out / "summary.json", {
        "status": "complete",
        "epochs": cfg.epochs,
        "steps": step,
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "config_hash": model_cfg.config_hash(),
        "num_params": len(params),
        "degenerate_total": degenerate_total,
        "snapshots": snapshots,
    })
    return RunResult(out, params, train_acc, test_acc, step)
