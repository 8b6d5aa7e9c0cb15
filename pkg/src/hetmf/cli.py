"""Command line harness: calibrate, train, partition, bench.

Configuration comes from an optional "key = value" file plus flags, flags
winning.  Exit codes: 0 success, 2 usage/config error, 3 target RMSE not
reached within the epoch budget, 4 division plan failed validation.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import costmodel, engine, workers
from .costmodel import (CalibrationProfile, NotCalibratedError, calibrate,
                        load_profile, predicted_makespan, save_profile, solve_alpha)
from .data import build_grid, load_ratings, shuffle_triples
from .engine import ConfigError, RunConfig, plan_report, run_training, \
    write_balance_report, write_metrics_csv
from .partition import MODE_NONUNIFORM, MODE_UNIFORM, PlanError
from .scheduler import CLASS_BATCH, CLASS_STREAM
from .sgd import save_factors

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TARGET = 3
EXIT_PLAN = 4

_CONFIG_KEYS = {f.name for f in RunConfig.__dataclass_fields__.values()}
_BOOL_KEYS = {"synthetic", "log_train_loss", "trace"}


def read_config_file(path) -> dict:
    """Parse "key = value" lines; '#' starts a comment, keys use underscores."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config entry {line!r}")
            values[key] = value.strip()
    return values


def _coerce(key: str, value: str):
    if key in _BOOL_KEYS:
        return value.lower() in ("1", "true", "yes", "on")
    field = RunConfig.__dataclass_fields__[key]
    text = field.type
    if "int" in text:
        return int(value)
    if "float" in text:
        return float(value)
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetmf",
        description="Blocked parallel SGD matrix factorization across stream "
                    "and batch worker pools")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="key = value config file; flags win")
        p.add_argument("--train", dest="train_path", help="training ratings file")
        p.add_argument("--test", dest="test_path", help="held-out ratings file")
        p.add_argument("--synthetic", action="store_true", default=None,
                       help="use the built-in low-rank generator")
        p.add_argument("--synth-rows", type=int, dest="synth_rows")
        p.add_argument("--synth-cols", type=int, dest="synth_cols")
        p.add_argument("--synth-rank", type=int, dest="synth_rank")
        p.add_argument("--synth-density", type=float, dest="synth_density")
        p.add_argument("--synth-noise", type=float, dest="synth_noise")
        p.add_argument("--k", type=int, dest="n_factors", help="latent factors")
        p.add_argument("--lambda-p", type=float, dest="reg_user",
                       help="user-side regularization")
        p.add_argument("--lambda-q", type=float, dest="reg_item",
                       help="item-side regularization")
        p.add_argument("--gamma", type=float, dest="learning_rate")
        p.add_argument("--epochs", type=int, dest="epochs")
        p.add_argument("--target-rmse", type=float, dest="target_rmse")
        p.add_argument("--threads", type=int, dest="n_stream",
                       help="stream worker count")
        p.add_argument("--accel", type=int, dest="n_batch",
                       help="batch worker count")
        p.add_argument("--accel-lanes", type=int, dest="batch_lanes")
        p.add_argument("--accel-overhead-ms", type=float, dest="batch_overhead_ms")
        p.add_argument("--accel-bandwidth-mb", type=float, dest="batch_bandwidth_mb")
        p.add_argument("--schedule", choices=engine.SCHEDULES, dest="schedule")
        p.add_argument("--division", choices=(MODE_UNIFORM, MODE_NONUNIFORM),
                       dest="division")
        p.add_argument("--alpha", type=float, dest="alpha",
                       help="batch-region workload fraction override")
        p.add_argument("--seed", type=int, dest="seed")
        p.add_argument("--profile", dest="profile_path", help="calibration profile path")
        p.add_argument("--out", dest="out_dir", help="output directory")
        p.add_argument("--no-train-loss", action="store_false", dest="log_train_loss",
                       default=None)
        p.add_argument("--trace", action="store_true", default=None,
                       help="write a per-lease trace CSV")

    p_cal = sub.add_parser("calibrate", help="fit cost models for both worker classes")
    shared(p_cal)
    p_cal.add_argument("--segments", type=int, default=16,
                       help="prefix workload count (default 16)")
    p_cal.add_argument("--repeats", type=int, default=5,
                       help="timings averaged over this many runs (default 5)")

    p_train = sub.add_parser("train", help="train factor matrices")
    shared(p_train)

    p_part = sub.add_parser("partition", help="inspect the division plan")
    shared(p_part)
    p_part.add_argument("--dry-run", action="store_true",
                        help="print the plan and validation diagnostics")

    p_bench = sub.add_parser("bench", help="throughput sweeps for both classes")
    shared(p_bench)
    p_bench.add_argument("--sizes", default="1000,10000,100000,1000000",
                         help="comma-separated workload sizes")
    p_bench.add_argument("--repeats", type=int, default=3)
    return parser


def make_config(args) -> RunConfig:
    config = RunConfig()
    if args.config:
        for key, value in read_config_file(args.config).items():
            setattr(config, key, _coerce(key, value))
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    return config


def _ensure_out(config: RunConfig) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    return config.out_dir


def cmd_calibrate(args) -> int:
    config = make_config(args)
    config.validate()
    usable = os.cpu_count() or 1
    want = config.n_stream + config.n_batch * config.batch_lanes
    if want > usable:
        print(f"error: topology wants {want} threads but only {usable} cores "
              "are available", file=sys.stderr)
        return EXIT_USAGE
    matrix = engine.load_train_data(config)
    matrix = shuffle_triples(matrix, config.seed)
    profile = calibrate(matrix, config.hyperparams(), config.batch_config(),
                        config.topology(), segments=args.segments,
                        repeats=args.repeats, seed=config.seed)
    out = _ensure_out(config)
    path = config.profile_path or os.path.join(out, "profile.txt")
    save_profile(path, profile)
    print(f"profile written to {path}")
    for name, model in (("stream", profile.stream),
                        ("batch.transfer_in", profile.transfer_in),
                        ("batch.transfer_out", profile.transfer_out),
                        ("batch.kernel", profile.kernel)):
        desc = ", ".join(f"{k}={v}" for k, v in model.to_items())
        print(f"  {name}: {desc}")
    alpha = solve_alpha(profile, config.topology(), matrix.nnz)
    print(f"balanced batch share for this dataset: alpha={alpha:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = make_config(args)
    config.validate()
    profile = None
    if config.division == MODE_NONUNIFORM and config.alpha is None:
        path = config.profile_path or os.path.join(config.out_dir, "profile.txt")
        profile = load_profile(path, config.topology())
        if profile.stale:
            print("warning: profile fingerprint does not match this topology; "
                  "using it anyway", file=sys.stderr)
    result = run_training(config, profile=profile)
    out = _ensure_out(config)
    save_factors(os.path.join(out, "factors.bin"), result.model)
    write_metrics_csv(os.path.join(out, "metrics.csv"), result.metrics)
    write_balance_report(os.path.join(out, "imbalance.txt"), result.balance)
    with open(os.path.join(out, "plan.txt"), "w", encoding="utf-8") as fh:
        fh.write(plan_report(result.plan))
    if config.trace:
        result.scheduler.write_trace(os.path.join(out, "trace.csv"))
    last = result.metrics[-1]
    print(f"epochs run: {result.epochs_run}, wall: {result.wall_seconds:.2f}s")
    if last.test_rmse is not None:
        print(f"final test RMSE: {last.test_rmse:.4f}")
    if result.alpha is not None:
        print(f"batch-region share alpha: {result.alpha:.4f}")
    if config.target_rmse is not None and not result.target_reached:
        print(f"target RMSE {config.target_rmse} not reached within "
              f"{config.epochs} epochs", file=sys.stderr)
        return EXIT_TARGET
    return EXIT_OK


def cmd_partition(args) -> int:
    config = make_config(args)
    config.validate()
    profile = None
    if config.division == MODE_NONUNIFORM and config.alpha is None:
        path = config.profile_path or os.path.join(config.out_dir, "profile.txt")
        profile = load_profile(path, config.topology())
    matrix = shuffle_triples(engine.load_train_data(config), config.seed)
    plan, _ = engine.plan_for(config, matrix, profile)
    grid = None
    if plan.row_cuts is not None:
        grid = build_grid(matrix, plan.row_cuts, plan.col_cuts,
                          plan.region_of_row, plan.sub_row_parent)
    print(plan_report(plan, grid), end="")
    print("validation: ok")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = make_config(args)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    out = _ensure_out(config)
    stream = workers.throughput_sweep(CLASS_STREAM, sizes, repeats=args.repeats,
                                      hparams=config.hyperparams(), seed=config.seed)
    batch = workers.throughput_sweep(CLASS_BATCH, sizes, repeats=args.repeats,
                                     hparams=config.hyperparams(),
                                     batch_config=config.batch_config(),
                                     seed=config.seed)
    with open(os.path.join(out, "bench_stream.csv"), "w", encoding="utf-8") as fh:
        fh.write("size,seconds,elements_per_second\n")
        for row in stream:
            fh.write(f"{row['size']},{row['seconds']:.9f},"
                     f"{row['elements_per_second']:.3f}\n")
    with open(os.path.join(out, "bench_batch_kernel.csv"), "w", encoding="utf-8") as fh:
        fh.write("size,seconds,elements_per_second\n")
        for row in batch:
            fh.write(f"{row['size']},{row['kernel_seconds']:.9f},"
                     f"{row['size'] / row['kernel_seconds']:.3f}\n")
    with open(os.path.join(out, "bench_batch_staging.csv"), "w", encoding="utf-8") as fh:
        fh.write("size,stage_in_seconds,stage_out_seconds,total_seconds,"
                 "elements_per_second\n")
        for row in batch:
            fh.write(f"{row['size']},{row['stage_in_seconds']:.9f},"
                     f"{row['stage_out_seconds']:.9f},{row['seconds']:.9f},"
                     f"{row['elements_per_second']:.3f}\n")
    print(f"wrote 3 sweep CSVs to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    commands = {"calibrate": cmd_calibrate, "train": cmd_train,
                "partition": cmd_partition, "bench": cmd_bench}
    try:
        return commands[args.command](args)
    except (ConfigError, NotCalibratedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlanError as exc:
        print(f"plan validation failed: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
