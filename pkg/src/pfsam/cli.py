"""Command-line entry point: ``pfsam train | sharpness | analyze | sweep``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric abort during
training, 4 partial sweep.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import model as mdl
from .analysis.snapshot import SnapshotFormatError
from .analysis.thresholds import EmptyGridError
from .config import ConfigError, load_run_config, load_study_config
from .data import DataConfigError, DataFormatError
from .io import atomic_write_json
from .sweep import analyze_snapshot_file, run_sharpness, run_sweep
from .training import NumericAbort, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4

log = logging.getLogger("pfsam")

_INPUT_ERRORS = (ConfigError, DataConfigError, DataFormatError, mdl.IncompatibleCheckpoint,
                 mdl.CheckpointFormatError, mdl.ConfigError, OSError)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config).with_overrides(args.seed, args.out)
    try:
        result = train(cfg)
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{result.out}: {result.steps} steps, train accuracy {result.train_accuracy:.4f}, "
          f"test accuracy {result.test_accuracy:.4f}")
    return EXIT_OK


def cmd_sharpness(args) -> int:
    cfg = load_run_config(args.config).with_overrides(args.seed)
    ckpt = Path(args.checkpoint)
    # checkpoints live in <run>/checkpoints/, so the report defaults to the run directory
    out_dir = Path(args.out) if args.out else ckpt.parent.parent
    res = run_sharpness(ckpt, cfg, args.samples, args.max_iters, cfg.seed, args.rel_tol)
    report = {
        "checkpoint": str(ckpt),
        "eigenvalue": res.eigenvalue,
        "iterations": res.iterations,
        "converged": res.converged,
        "degenerate": res.degenerate,
        "samples": args.samples,
        "seed": cfg.seed,
        "rel_tol": args.rel_tol,
    }
    atomic_write_json(out_dir / "sharpness.json", report)
    flag = "converged" if res.converged else "NOT CONVERGED"
    if res.degenerate:
        flag = "degenerate (vanishing Hessian-vector product)"
    print(f"sharpness {res.eigenvalue!r} after {res.iterations} iterations, {flag}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    status = EXIT_OK
    for path in args.snapshots:
        out_dir = Path(args.out) if args.out else None
        try:
            scores = analyze_snapshot_file(path, out_dir)
        except (SnapshotFormatError, EmptyGridError, OSError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            status = EXIT_CONFIG
            continue
        print(f"{path}: mean delta_forget {scores.mean_forget!r}, mean delta_target {scores.mean_target!r}")
    return status


def cmd_sweep(args) -> int:
    study = load_study_config(args.config)
    if args.out:
        study = study.model_copy(update={"out": str(args.out)})
    report = run_sweep(study, args.workers)
    print(f"{report.out}: {len(report.completed)} members complete, {len(report.failed)} failed")
    for key, err in report.failed:
        print(f"error: member {key}: {err}", file=sys.stderr)
    return EXIT_PARTIAL if report.partial else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfsam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True, help="run config (JSON)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sharpness", help="dominant Hessian eigenvalue of a checkpoint")
    p.add_argument("--config", required=True, help="run config the checkpoint was trained with")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="seed for the evaluation batch and start vector")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--samples", type=int, default=256, help="evaluation batch size")
    p.add_argument("--rel-tol", type=float, default=1e-4, help="power-iteration stopping tolerance")
    p.add_argument("--out", help="directory for sharpness.json (default: the run directory)")
    p.set_defaults(func=cmd_sharpness)

    p = sub.add_parser("analyze", help="MI curves and forgetting scores of snapshot files")
    p.add_argument("snapshots", nargs="+")
    p.add_argument("--out", help="directory for the CSVs (default: next to each snapshot)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train a pool and correlate forgetting with accuracy")
    p.add_argument("--config", required=True, help="study config (JSON)")
    p.add_argument("--workers", type=int, help="parallel member processes")
    p.add_argument("--out", help="override the study output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "max_iters", 1) < 1 or getattr(args, "samples", 1) < 1 \
            or (getattr(args, "workers", None) is not None and args.workers < 1) \
            or not getattr(args, "rel_tol", 1.0) > 0:
        print("error: --max-iters, --samples, --rel-tol and --workers must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # schedule/step-count mismatches surface as ValueError once data sizes are known
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
