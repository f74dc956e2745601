"""The m-sweep study: train a pool of runs, then correlate forgetting and sharpness with accuracy.

Aggregation reads only files written by the member runs (summary.json,
sharpness.json and the snapshot files), so any report can be rebuilt from a
finished sweep directory without retraining.
"""

from __future__ import annotations

import concurrent.futures as cf
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as mdl
from .analysis.correlation import (
    correlate_pool,
    write_adjusted_csv,
    write_correlation_csv,
    write_forgetting_csv,
    write_mi_curve_csv,
    write_plot_data_csv,
)
from .analysis.information import mi_curve
from .analysis.sharpness import SharpnessResult, model_sharpness
from .analysis.snapshot import load_snapshot
from .analysis.thresholds import EmptyGridError, ForgettingScores, adjust_snapshot, forgetting_scores
from .config import StudyConfig
from .io import atomic_write_csv, atomic_write_json
from .perturb import Task
from .training import load_datasets, train

log = logging.getLogger(__name__)

POOL_COLUMNS = ["kind", "m", "seed", "test_accuracy", "sharpness", "mean_forget", "mean_target",
                "snapshots_used"]


def analyze_snapshot_file(path, out_dir=None) -> ForgettingScores:
    """Raw MI curves, adjusted-grid curves and forgetting scores for one snapshot file.

    Writes ``<stem>_mi.csv``, ``<stem>_adjusted.csv`` and ``<stem>_forgetting.csv``
    into ``out_dir`` (default: next to the snapshot). The raw curve is written
    even when the adjusted grid cannot be built.
    """
    path = Path(path)
    out_dir = path.parent if out_dir is None else Path(out_dir)
    snap = load_snapshot(path)
    curves = mi_curve(snap)
    write_mi_curve_csv(curves.unperturbed, curves.perturbed, out_dir / f"{path.stem}_mi.csv")
    adjusted = adjust_snapshot(curves)
    write_adjusted_csv(adjusted, out_dir / f"{path.stem}_adjusted.csv")
    scores = forgetting_scores(adjusted)
    write_forgetting_csv(scores, out_dir / f"{path.stem}_forgetting.csv")
    return scores


def sharpness_indices(n: int, samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 256])
    return np.sort(rng.choice(n, size=min(samples, n), replace=False))


def run_sharpness(checkpoint, cfg, samples: int = 256, max_iters: int = 100, seed: int = 0,
                  rel_tol: float = 1e-4) -> SharpnessResult:
    """Dominant Hessian eigenvalue of the training loss on a fixed seeded training batch."""
    train_ds, _ = load_datasets(cfg)
    model_cfg = cfg.model_config_for(train_ds.dim, train_ds.num_classes)
    cp = mdl.load(checkpoint, expected=model_cfg)
    idx = sharpness_indices(len(train_ds), samples, seed)
    task = Task(model_cfg, cfg.loss.build())
    return model_sharpness(task, cp.params, train_ds.X[idx], train_ds.y[idx], max_iters=max_iters,
                           rel_tol=rel_tol, seed=seed)


def member_dir(study_out, kind: str, m: int, seed: int) -> Path:
    return Path(study_out) / "runs" / f"{kind}_m{m:04d}_s{seed}"


def _run_member(study_dump: dict, kind: str, m: int, seed: int) -> str:
    study = StudyConfig.model_validate(study_dump)
    out = member_dir(study.out, kind, m, seed)
    cfg = study.member(kind, m, seed, str(out))
    train(cfg)
    res = run_sharpness(out / "checkpoints" / "final.ckpt", cfg, study.sharpness_samples, study.sharpness_max_iters, seed)
    atomic_write_json(out / "sharpness.json", {
        "eigenvalue": res.eigenvalue,
        "iterations": res.iterations,
        "converged": res.converged,
        "degenerate": res.degenerate,
        "samples": study.sharpness_samples,
    })
    return str(out)


@dataclass
class SweepReport:
    out: Path
    completed: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failed)


def members(study: StudyConfig) -> list[tuple[str, int, int]]:
    return [(k, m, s) for k in study.kinds for m in study.m_values for s in study.seeds]


def train_pool(study: StudyConfig, workers: Optional[int] = None) -> SweepReport:
    """Train every member. On the first failure no new member starts; running ones finish."""
    workers = study.workers if workers is None else workers
    report = SweepReport(Path(study.out))
    todo = members(study)
    dump = study.model_dump(mode="json")
    if workers <= 1:
        for i, key in enumerate(todo):
            try:
                _run_member(dump, *key)
                report.completed.append(key)
            except Exception as exc:  # a member failure must not lose the others' results
                log.error("member %s failed: %s", key, exc)
                report.failed.append((key, str(exc)))
                report.notes.append(f"{len(todo) - i - 1} members not started")
                break
        return report
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(_run_member, dump, *key): key for key in todo}
        pending = set(futures)
        while pending:
            done, pending = cf.wait(pending, return_when=cf.FIRST_EXCEPTION)
            for fut in done:
                key = futures[fut]
                exc = fut.exception()
                if exc is None:
                    report.completed.append(key)
                else:
                    log.error("member %s failed: %s", key, exc)
                    report.failed.append((key, str(exc)))
            if report.failed:
                for fut in pending:
                    fut.cancel()
                running = {f for f in pending if not f.cancelled()}
                for fut in cf.as_completed(running):
                    key = futures[fut]
                    if fut.exception() is None:
                        report.completed.append(key)
                    else:
                        report.failed.append((key, str(fut.exception())))
                skipped = len(pending) - len(running)
                if skipped:
                    report.notes.append(f"{skipped} members not started")
                break
    order = {key: i for i, key in enumerate(todo)}
    report.completed.sort(key=order.__getitem__)
    report.failed.sort(key=lambda item: order[item[0]])
    return report


def _member_scores(run: Path):
    """Per-level forgetting scores averaged over the run's snapshot epochs."""
    summary = json.loads((run / "summary.json").read_text())
    forget, target = [], []
    levels = None
    for name in summary["snapshots"]:
        snap_path = run / "snapshots" / name
        try:
            scores = analyze_snapshot_file(snap_path, run / "analysis")
        except EmptyGridError:
            log.warning("%s: no positive conditional MI, epoch skipped", snap_path)
            continue
        levels = scores.levels
        forget.append(scores.delta_forget)
        target.append(scores.delta_target)
    if not forget:
        return summary, None, None, levels, 0
    return summary, np.mean(forget, axis=0), np.mean(target, axis=0), levels, len(forget)


def aggregate(study: StudyConfig, completed=None) -> dict:
    """Correlation CSVs per perturbation kind, built from the member artifacts."""
    out = Path(study.out)
    keys = members(study) if completed is None else list(completed)
    results = {}
    for kind in study.kinds:
        pool_rows, forget, target, sharp, acc = [], [], [], [], []
        levels = None
        for k, m, seed in keys:
            if k != kind:
                continue
            run = member_dir(out, k, m, seed)
            summary, f, t, lv, used = _member_scores(run)
            s = json.loads((run / "sharpness.json").read_text())["eigenvalue"]
            pool_rows.append([kind, m, seed, summary["test_accuracy"], s,
                              np.nan if f is None else float(np.mean(f)),
                              np.nan if t is None else float(np.mean(t)), used])
            if f is None:
                continue
            levels = lv
            forget.append(f)
            target.append(t)
            sharp.append(s)
            acc.append(summary["test_accuracy"])
        atomic_write_csv(out / f"pool_{kind}.csv", POOL_COLUMNS, pool_rows)
        if len(acc) < 2:
            log.warning("kind %s: fewer than two usable members, no correlation", kind)
            continue
        result = correlate_pool(np.array(forget), np.array(target), np.array(sharp), np.array(acc),
                                levels, study.n_perm, seed=0)
        write_correlation_csv(result, out / f"correlation_{kind}.csv")
        write_plot_data_csv(result, out / f"plot_{kind}.csv")
        results[kind] = result
    return results


def run_sweep(study: StudyConfig, workers: Optional[int] = None) -> SweepReport:
    out = Path(study.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "study.json", study.model_dump(mode="json"))
    report = train_pool(study, workers)
    aggregate(study, report.completed)
    atomic_write_json(out / "sweep_status.json", {
        "status": "partial" if report.partial else "complete",
        "completed": [list(k) for k in report.completed],
        "failed": [{"member": list(k), "error": e} for k, e in report.failed],
        "notes": report.notes,
    })
    return report
