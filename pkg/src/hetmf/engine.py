"""End-to-end training driver: plan, grid, workers, epoch loop, outputs.

The driver thread owns lifecycle: it builds the plan and grid, spawns the
worker threads, then sits at the scheduler's epoch barriers sampling
metrics (wall time, training loss, test RMSE) and deciding whether to
continue, stop at the target, or stop at the epoch budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import costmodel, kernels
from .costmodel import CalibrationProfile, DeviceTopology, solve_alpha
from .data import RatingMatrix, build_grid, shuffle_triples, synthetic_ratings
from .partition import (MODE_NONUNIFORM, MODE_UNIFORM, DivisionPlan, PlanError,
                        nonuniform_plan, uniform_plan, validate_plan)
from .scheduler import (POLICY_FREE, POLICY_QUOTA, POLICY_REGIONS,
                        GridScheduler)
from .sgd import FactorModel, Hyperparams, RmseReport, init_model, regularized_loss, rmse
from .workers import BatchWorker, BatchWorkerConfig, StreamWorker

SCHEDULE_HSGD = "hsgd"
SCHEDULE_HSGD_STAR = "hsgd-star"
SCHEDULE_STREAM_ONLY = "stream-only"
SCHEDULE_BATCH_ONLY = "batch-only"
SCHEDULES = (SCHEDULE_HSGD, SCHEDULE_HSGD_STAR, SCHEDULE_STREAM_ONLY,
             SCHEDULE_BATCH_ONLY)

# Extreme splits would leave one region too thin to band; keep the solved
# fraction comfortably inside the open interval.
ALPHA_CLAMP = (0.05, 0.95)


class ConfigError(ValueError):
    """Inconsistent run configuration."""


@dataclass
class RunConfig:
    """Everything one training run needs; mirrors the CLI flags."""

    train_path: str | None = None
    test_path: str | None = None
    synthetic: bool = False
    synth_rows: int = 500
    synth_cols: int = 500
    synth_rank: int = 8
    synth_density: float = 0.05
    synth_noise: float = 0.1

    n_factors: int = 8
    reg_user: float = 0.05
    reg_item: float = 0.05
    learning_rate: float = 0.005
    epochs: int = 10
    target_rmse: float | None = None

    n_stream: int = 1
    n_batch: int = 0
    batch_lanes: int = 4
    batch_overhead_ms: float = 2.0
    batch_bandwidth_mb: float = 4096.0

    schedule: str = SCHEDULE_STREAM_ONLY
    division: str = MODE_UNIFORM
    alpha: float | None = None
    seed: int = 0
    profile_path: str | None = None
    out_dir: str = "out"
    log_train_loss: bool = True
    trace: bool = False

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(n_factors=self.n_factors, reg_user=self.reg_user,
                           reg_item=self.reg_item, learning_rate=self.learning_rate,
                           epochs=self.epochs)

    def topology(self) -> DeviceTopology:
        return DeviceTopology(n_stream=self.n_stream, n_batch=self.n_batch)

    def batch_config(self) -> BatchWorkerConfig:
        return BatchWorkerConfig(lanes=self.batch_lanes,
                                 launch_overhead=self.batch_overhead_ms / 1e3,
                                 bandwidth=self.batch_bandwidth_mb * 1e6)

    def validate(self, require_data: bool = True) -> None:
        self.hyperparams().validate()
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.division not in (MODE_UNIFORM, MODE_NONUNIFORM):
            raise ConfigError(f"unknown division {self.division!r}")
        if self.alpha is not None and not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be within [0, 1], got {self.alpha}")
        if self.schedule == SCHEDULE_HSGD and self.division != MODE_UNIFORM:
            raise ConfigError("hsgd schedule requires uniform division")
        if self.schedule == SCHEDULE_HSGD_STAR and self.division != MODE_NONUNIFORM:
            raise ConfigError("hsgd-star schedule requires nonuniform division")
        if self.schedule == SCHEDULE_STREAM_ONLY and self.n_stream < 1:
            raise ConfigError("stream-only runs need n_stream >= 1")
        if self.schedule == SCHEDULE_BATCH_ONLY and self.n_batch < 1:
            raise ConfigError("batch-only runs need n_batch >= 1")
        if self.schedule in (SCHEDULE_HSGD, SCHEDULE_HSGD_STAR):
            if self.n_stream < 1 or self.n_batch < 1:
                raise ConfigError(f"{self.schedule} runs need both worker classes")
        if require_data and not self.synthetic and self.train_path is None:
            raise ConfigError("either --train or --synthetic is required")
        self.batch_config().validate()
        self.topology()


def load_train_data(config: RunConfig) -> RatingMatrix:
    from .data import load_ratings
    if config.synthetic:
        return synthetic_ratings(config.synth_rows, config.synth_cols,
                                 config.synth_rank, config.synth_density,
                                 config.synth_noise, config.seed)
    return load_ratings(config.train_path)


@dataclass
class MetricsRow:
    epoch: int
    wall_seconds: float
    train_loss: float | None
    test_rmse: float | None


@dataclass
class TrainResult:
    model: FactorModel
    metrics: list
    epochs_run: int
    target_reached: bool
    plan: DivisionPlan
    alpha: float | None
    balance: object
    scheduler: GridScheduler
    wall_seconds: float
    test_report: RmseReport | None = None


def worker_topology(config: RunConfig):
    """Worker counts actually spawned for the configured schedule."""
    if config.schedule == SCHEDULE_STREAM_ONLY:
        return config.n_stream, 0
    if config.schedule == SCHEDULE_BATCH_ONLY:
        return 0, config.n_batch
    return config.n_stream, config.n_batch


def plan_for(config: RunConfig, matrix: RatingMatrix,
             profile: CalibrationProfile | None = None):
    """Build and validate the division plan; returns (plan, alpha_used)."""
    topology = config.topology()
    if config.division == MODE_UNIFORM:
        n_stream, n_batch = worker_topology(config)
        plan = uniform_plan(DeviceTopology(max(n_stream, 0), max(n_batch, 0)),
                            shape=(matrix.n_users, matrix.n_items))
        alpha = None
    else:
        if config.alpha is not None:
            alpha = config.alpha
        else:
            if profile is None:
                raise ConfigError("nonuniform division needs a calibration "
                                  "profile or an explicit alpha")
            alpha = solve_alpha(profile, topology, matrix.nnz)
        alpha = min(max(alpha, ALPHA_CLAMP[0]), ALPHA_CLAMP[1])
        plan = nonuniform_plan(topology, alpha, matrix)
    problems = validate_plan(plan, config.topology()
                             if config.division == MODE_NONUNIFORM
                             else DeviceTopology(*worker_topology(config)))
    if problems:
        raise PlanError("; ".join(problems))
    return plan, alpha


def _policy_for(schedule: str) -> str:
    if schedule == SCHEDULE_HSGD:
        return POLICY_FREE
    if schedule == SCHEDULE_HSGD_STAR:
        return POLICY_REGIONS
    return POLICY_QUOTA


def run_training(config: RunConfig, matrix: RatingMatrix | None = None,
                 testset: RatingMatrix | None = None,
                 profile: CalibrationProfile | None = None) -> TrainResult:
    """Train factor matrices per the configuration; see TrainResult."""
    config.validate(require_data=matrix is None)
    hparams = config.hyperparams()
    kernels.warmup(hparams.n_factors)

    if matrix is None:
        matrix = load_train_data(config)
    if testset is None and config.test_path:
        from .data import load_ratings
        testset = load_ratings(config.test_path)
    if profile is None and config.profile_path and config.division == MODE_NONUNIFORM \
            and config.alpha is None:
        profile = costmodel.load_profile(config.profile_path, config.topology())

    shuffled = shuffle_triples(matrix, config.seed)
    plan, alpha = plan_for(config, shuffled, profile)
    grid = build_grid(shuffled, plan.row_cuts, plan.col_cuts,
                      plan.region_of_row, plan.sub_row_parent)
    model = init_model(matrix.n_users, matrix.n_items, hparams, config.seed)

    scheduler = GridScheduler(grid, _policy_for(config.schedule),
                              max_epochs=config.epochs, seed=config.seed,
                              epoch_sync=True, trace=config.trace)
    n_stream, n_batch = worker_topology(config)
    workers = [StreamWorker(i, scheduler, model, grid, hparams)
               for i in range(n_stream)]
    workers += [BatchWorker(n_stream + i, scheduler, model, grid, hparams,
                            config.batch_config())
                for i in range(n_batch)]

    def sample(epoch: int, start: float) -> MetricsRow:
        loss = (regularized_loss(shuffled, model, hparams.reg_user, hparams.reg_item)
                if config.log_train_loss else None)
        test_value = rmse(testset, model, train=matrix).value if testset is not None else None
        return MetricsRow(epoch=epoch, wall_seconds=time.perf_counter() - start,
                          train_loss=loss, test_rmse=test_value)

    def current_rmse() -> float:
        if testset is not None:
            return rmse(testset, model, train=matrix).value
        return rmse(shuffled, model).value

    metrics = []
    target_reached = False
    start = time.perf_counter()
    for worker in workers:
        worker.start()
    epochs_run = 0
    while True:
        epoch, terminated = scheduler.wait_epoch_end()
        epochs_run = epoch
        metrics.append(sample(epoch, start))
        if terminated:
            break
        if config.target_rmse is not None and current_rmse() <= config.target_rmse:
            target_reached = True
            scheduler.stop("target")
            scheduler.wait_epoch_end()
            break
        scheduler.resume()
    for worker in workers:
        worker.join()
    wall = time.perf_counter() - start
    for worker in workers:
        if worker.error is not None:
            raise worker.error
    if config.target_rmse is not None and not target_reached:
        # the final epoch may have crossed the target
        target_reached = current_rmse() <= config.target_rmse

    return TrainResult(model=model, metrics=metrics, epochs_run=epochs_run,
                       target_reached=target_reached, plan=plan, alpha=alpha,
                       balance=scheduler.imbalance_report(), scheduler=scheduler,
                       wall_seconds=wall,
                       test_report=(rmse(testset, model, train=matrix)
                                    if testset is not None else None))


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,wall_seconds,train_loss,test_rmse\n")
        for row in metrics:
            loss = "" if row.train_loss is None else f"{row.train_loss:.10g}"
            tr = "" if row.test_rmse is None else f"{row.test_rmse:.10g}"
            fh.write(f"{row.epoch},{row.wall_seconds:.9f},{loss},{tr}\n")


def write_balance_report(path, balance) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"max/min update-count ratio: {balance.max_min_ratio:.4f}\n")
        for name, total in balance.per_region_total.items():
            fh.write(f"region {name}: total={total} "
                     f"mean={balance.per_region_mean[name]:.3f}\n")
        fh.write("count histogram (count: blocks):\n")
        for count, blocks in enumerate(balance.histogram):
            if blocks:
                fh.write(f"  {count}: {blocks}\n")


def plan_report(plan: DivisionPlan, grid=None) -> str:
    lines = [f"mode: {plan.mode}"]
    if plan.mode == MODE_NONUNIFORM:
        lines.append(f"alpha (batch-region share): {plan.alpha:.4f}")
        lines.append(f"region boundary row: {plan.region_boundary_row}")
        lines.append(f"batch region: {plan.batch_coarse_rows} coarse rows x "
                     f"{plan.batch_sub_rows_per_coarse} sub-rows")
        lines.append(f"stream region rows: {plan.stream_rows}")
    lines.append(f"grid: {plan.row_band_count} row bands x {plan.col_count} "
                 f"column bands ({plan.block_count} blocks)")
    if plan.row_cuts is not None:
        lines.append("row cuts: " + " ".join(str(int(c)) for c in plan.row_cuts))
        lines.append("col cuts: " + " ".join(str(int(c)) for c in plan.col_cuts))
    if grid is not None:
        counts = grid.block_counts().reshape(grid.n_row_bands, grid.n_col_bands)
        lines.append("per-row-band nnz: " + " ".join(str(int(x)) for x in counts.sum(axis=1)))
        lines.append("per-col-band nnz: " + " ".join(str(int(x)) for x in counts.sum(axis=0)))
    return "\n".join(lines) + "\n"
