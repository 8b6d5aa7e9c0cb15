"""Grid geometry: uniform division and the two-region nonuniform division.

Uniform plans cut the matrix into (n_stream + n_batch) row bands and
(n_stream + n_batch + 1) column bands of equal index width, enough blocks
that a finishing worker can always find a free row and column.

Nonuniform plans split the rows into a batch region (top) holding a target
fraction of the rating mass and a stream region below it.  Columns:
n_stream + 2*n_batch + 1 full-height bands, so every stream worker can hold
one column, every batch worker two (current block plus the staged-ahead
one), and one column stays spare.  The batch region gets n_batch equal-mass
coarse rows, each pre-split into ceil((n_stream+n_batch)/n_batch) sub-rows
so it can be shared at fine granularity once work stealing starts; the
stream region gets n_stream + n_batch equal-mass rows so batch workers can
steal there without running out of independent blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .costmodel import DeviceTopology
from .data import REGION_BATCH, REGION_STREAM, RatingMatrix

MODE_UNIFORM = "uniform"
MODE_NONUNIFORM = "nonuniform"


class PlanError(ValueError):
    """Division plan cannot be constructed or fails validation."""


@dataclass
class DivisionPlan:
    mode: str
    alpha: float                      # fraction of elements in the batch region
    col_count: int
    stream_rows: int
    batch_coarse_rows: int
    batch_sub_rows_per_coarse: int
    region_boundary_row: int | None = None   # first stream-region matrix row
    row_cuts: np.ndarray | None = None
    col_cuts: np.ndarray | None = None
    region_of_row: np.ndarray | None = None
    sub_row_parent: np.ndarray | None = None

    @property
    def row_band_count(self) -> int:
        return self.stream_rows + self.batch_coarse_rows * self.batch_sub_rows_per_coarse

    @property
    def block_count(self) -> int:
        return self.row_band_count * self.col_count


def _equal_width_cuts(extent: int, bands: int) -> np.ndarray:
    """Equal index-width bands, remainder spread one per band from the front."""
    if bands < 1 or extent < bands:
        raise PlanError(f"cannot cut extent {extent} into {bands} bands")
    base, rem = divmod(extent, bands)
    widths = [base + 1 if i < rem else base for i in range(bands)]
    return np.concatenate([[0], np.cumsum(widths)]).astype(np.int64)


def _equal_mass_cuts(prefix: np.ndarray, lo: int, hi: int, bands: int) -> np.ndarray:
    """Cut index range [lo, hi) into `bands` pieces of near-equal rating mass.

    prefix[i] is the cumulative element count of indices < i.  Cuts are
    forced strictly ascending, so every band keeps at least one index even
    when the mass is lumpy.
    """
    if hi - lo < bands:
        raise PlanError(f"range of {hi - lo} indices cannot make {bands} bands")
    total = prefix[hi] - prefix[lo]
    cuts = [lo]
    for b in range(1, bands):
        target = prefix[lo] + total * b / bands
        cut = int(np.searchsorted(prefix[lo:hi + 1], target) + lo)
        cut = max(cut, cuts[-1] + 1)
        cut = min(cut, hi - (bands - b))
        cuts.append(cut)
    cuts.append(hi)
    return np.asarray(cuts, dtype=np.int64)


def uniform_plan(topology: DeviceTopology, shape=None) -> DivisionPlan:
    """Minimal uniform grid: (workers) row bands x (workers + 1) column bands.

    With `shape` given, concrete equal-width cuts are attached; otherwise
    the plan carries geometry only.
    """
    workers = topology.n_stream + topology.n_batch
    rows = workers
    cols = workers + 1
    plan = DivisionPlan(mode=MODE_UNIFORM, alpha=0.0, col_count=cols,
                        stream_rows=rows, batch_coarse_rows=0,
                        batch_sub_rows_per_coarse=1)
    if shape is not None:
        n_rows, n_cols = shape
        plan.row_cuts = _equal_width_cuts(n_rows, rows)
        plan.col_cuts = _equal_width_cuts(n_cols, cols)
        plan.region_of_row = np.full(rows, REGION_STREAM, dtype=np.int8)
        plan.sub_row_parent = np.arange(rows, dtype=np.int64)
    return plan


def nonuniform_plan(topology: DeviceTopology, alpha: float,
                    matrix: RatingMatrix) -> DivisionPlan:
    """Two-region plan with the batch region sized to hold ~alpha of the mass."""
    n_stream, n_batch = topology.n_stream, topology.n_batch
    if n_stream < 1 or n_batch < 1:
        raise PlanError("nonuniform plans need at least one worker of each class")
    if not (0.0 < alpha < 1.0):
        raise PlanError(f"alpha must be in (0, 1), got {alpha}")

    sub_rows = math.ceil((n_stream + n_batch) / n_batch)
    cols = n_stream + 2 * n_batch + 1
    stream_rows = n_stream + n_batch
    batch_fine_rows = n_batch * sub_rows

    row_mass = np.bincount(matrix.users, minlength=matrix.n_users)
    row_prefix = np.concatenate([[0], np.cumsum(row_mass)])
    col_mass = np.bincount(matrix.items, minlength=matrix.n_items)
    col_prefix = np.concatenate([[0], np.cumsum(col_mass)])

    # Boundary row: prefix mass closest to alpha * nnz, clamped so both
    # regions keep enough rows for their band counts.
    target = alpha * matrix.nnz
    boundary = int(np.searchsorted(row_prefix, target))
    if boundary > 0 and abs(row_prefix[boundary - 1] - target) <= abs(row_prefix[min(boundary, matrix.n_users)] - target):
        boundary -= 1
    lo_bound = batch_fine_rows
    hi_bound = matrix.n_users - stream_rows
    if lo_bound > hi_bound:
        raise PlanError(f"matrix with {matrix.n_users} rows is too small for "
                        f"{batch_fine_rows} batch sub-rows plus {stream_rows} stream rows")
    boundary = min(max(boundary, lo_bound), hi_bound)

    coarse_cuts = _equal_mass_cuts(row_prefix, 0, boundary, n_batch)
    batch_cuts = [0]
    parent = []
    for c in range(n_batch):
        span = _equal_width_cuts(int(coarse_cuts[c + 1] - coarse_cuts[c]), sub_rows)
        batch_cuts.extend((span[1:] + coarse_cuts[c]).tolist())
        parent.extend([c] * sub_rows)
    stream_cuts = _equal_mass_cuts(row_prefix, boundary, matrix.n_users, stream_rows)
    row_cuts = np.asarray(batch_cuts + stream_cuts[1:].tolist(), dtype=np.int64)
    parent.extend(range(n_batch, n_batch + stream_rows))

    region = np.concatenate([
        np.full(batch_fine_rows, REGION_BATCH, dtype=np.int8),
        np.full(stream_rows, REGION_STREAM, dtype=np.int8),
    ])
    col_cuts = _equal_mass_cuts(col_prefix, 0, matrix.n_items, cols)

    actual_alpha = float(row_prefix[boundary]) / matrix.nnz if matrix.nnz else 0.0
    return DivisionPlan(mode=MODE_NONUNIFORM, alpha=alpha, col_count=cols,
                        stream_rows=stream_rows, batch_coarse_rows=n_batch,
                        batch_sub_rows_per_coarse=sub_rows,
                        region_boundary_row=boundary,
                        row_cuts=row_cuts, col_cuts=col_cuts,
                        region_of_row=region,
                        sub_row_parent=np.asarray(parent, dtype=np.int64))


def validate_plan(plan: DivisionPlan, topology: DeviceTopology) -> list[str]:
    """Check plan invariants; returns a list of violation messages (empty = ok).

    Uniform plans must satisfy the minimum block-count rule
    rows * cols >= (workers + 1) * workers and keep one spare column.
    Nonuniform plans must additionally reserve a second column per batch
    worker for the staged-ahead block.
    """
    problems = []
    workers = topology.n_stream + topology.n_batch
    if plan.mode == MODE_UNIFORM:
        need = (workers + 1) * workers
        if plan.row_band_count * plan.col_count < need:
            problems.append(
                f"block count {plan.row_band_count}x{plan.col_count}="
                f"{plan.block_count} below the minimum {need}")
        if plan.col_count < workers + 1:
            problems.append(f"{plan.col_count} columns leave no spare for "
                            f"{workers} concurrent workers")
    elif plan.mode == MODE_NONUNIFORM:
        expect_cols = topology.n_stream + 2 * topology.n_batch + 1
        if plan.col_count != expect_cols:
            problems.append(f"column count {plan.col_count} != {expect_cols}")
        if plan.stream_rows != workers:
            problems.append(f"stream row count {plan.stream_rows} != {workers}")
        if plan.batch_coarse_rows != topology.n_batch:
            problems.append(f"batch coarse rows {plan.batch_coarse_rows} != "
                            f"{topology.n_batch}")
        if topology.n_batch > 0:
            expect_sub = math.ceil(workers / topology.n_batch)
            if plan.batch_sub_rows_per_coarse != expect_sub:
                problems.append(f"sub-rows per coarse row "
                                f"{plan.batch_sub_rows_per_coarse} != {expect_sub}")
        # every worker, a staged-ahead column per batch worker, one spare
        if plan.col_count < workers + topology.n_batch + 1:
            problems.append(f"{plan.col_count} columns cannot hold {workers} "
                            f"workers plus {topology.n_batch} staged-ahead "
                            "columns with a spare")
    else:
        problems.append(f"unknown plan mode {plan.mode!r}")

    if plan.row_cuts is not None:
        if np.any(np.diff(plan.row_cuts) <= 0):
            problems.append("row cuts are not strictly ascending")
        if len(plan.row_cuts) - 1 != plan.row_band_count:
            problems.append("row cut count disagrees with band counts")
    if plan.col_cuts is not None and np.any(np.diff(plan.col_cuts) <= 0):
        problems.append("column cuts are not strictly ascending")
    if (plan.sub_row_parent is not None and plan.row_cuts is not None
            and plan.mode == MODE_NONUNIFORM):
        widths = np.diff(plan.row_cuts)
        for c in range(plan.batch_coarse_rows):
            fine = np.where(plan.sub_row_parent[:plan.row_band_count] == c)[0]
            fine = fine[fine < plan.batch_coarse_rows * plan.batch_sub_rows_per_coarse]
            if len(fine) and np.ptp(widths[fine]) > 1:
                problems.append(f"coarse row {c} sub-rows are not equal width")
    return problems
