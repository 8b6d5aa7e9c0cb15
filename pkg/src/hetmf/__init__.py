"""Blocked parallel SGD matrix factorization for mixed worker pools.

The package trains low-rank factor models over a sparse rating matrix with
two cooperating worker classes: stream workers (one thread, steady
throughput at any block size) and batch workers (staged, inner-parallel,
throughput that saturates with block size).  An offline calibration pass
fits per-class cost curves, a solver balances the workload split, and a
conflict-free scheduler hands out matrix blocks so no two workers ever
touch the same factor rows or columns.
"""

from .costmodel import (CalibrationProfile, CalibrationSample, DeviceTopology,
                        PiecewiseCostModel, batch_total_cost, calibrate,
                        detect_threshold, fit_linear, fit_piecewise,
                        fit_pre_threshold, load_profile, make_prefixes,
                        predicted_makespan, save_profile, solve_alpha)
from .data import (BlockGrid, RatingMatrix, build_grid, load_cache,
                   load_ratings, save_cache, shuffle_triples, synthetic_ratings)
from .engine import RunConfig, TrainResult, run_training
from .estimator import SGDFactorizer
from .partition import (DivisionPlan, nonuniform_plan, uniform_plan,
                        validate_plan)
from .scheduler import GridScheduler, Lease
from .sgd import (FactorModel, Hyperparams, block_epoch, init_model,
                  load_factors, predict_one, regularized_loss, rmse,
                  save_factors, sgd_update)
from .workers import BatchWorker, BatchWorkerConfig, StreamWorker, throughput_sweep

__version__ = "0.1.0"

__all__ = [
    "BatchWorker", "BatchWorkerConfig", "BlockGrid", "CalibrationProfile",
    "CalibrationSample", "DeviceTopology", "DivisionPlan", "FactorModel",
    "GridScheduler", "Hyperparams", "Lease", "PiecewiseCostModel",
    "RatingMatrix", "RunConfig", "SGDFactorizer", "StreamWorker",
    "TrainResult", "batch_total_cost", "block_epoch", "build_grid",
    "calibrate", "detect_threshold", "fit_linear", "fit_piecewise",
    "fit_pre_threshold", "init_model", "load_cache", "load_factors",
    "load_profile", "load_ratings", "make_prefixes", "nonuniform_plan",
    "predict_one", "predicted_makespan", "regularized_loss", "rmse",
    "run_training", "save_cache", "save_factors", "save_profile",
    "shuffle_triples", "sgd_update", "solve_alpha", "synthetic_ratings",
    "throughput_sweep", "uniform_plan", "validate_plan",
]
