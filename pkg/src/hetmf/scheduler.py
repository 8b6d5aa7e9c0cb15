"""Conflict-free block assignment with least-update selection.

The scheduler is the single synchronization point of a training run: all
grants, releases and phase transitions happen under one lock, and waiting
workers are woken on every release.  A granted lease covers one scheduling
unit (one block, or a whole coarse batch row-slice in the static phase)
plus, for batch workers, an optional staged-ahead unit in the same row
band and a different column.

Three policies:

  free    - any worker may take any block; candidates are ranked by
            cumulative update count.  An epoch is just an accounting
            boundary (n_blocks releases) used for metrics and termination.
  quota   - every block must be processed exactly once per epoch; the
            epoch ends when all are done.
  regions - quota semantics split across a batch region (coarse-grained
            while the phase is static) and a stream region.  When one
            region runs out of work first, the phase flips to dynamic:
            batch-region granularity drops to single sub-row blocks and
            idle workers steal from the other region.

Conflicts are tracked at fine row-band granularity, which subsumes the
coarse-row rule: a coarse lease occupies all of its sub-rows.  Two leases
of different workers may never share a row band or a column band; a batch
worker's staged-ahead unit shares its own primary's rows by design (that
is what the extra per-batch-worker column in the plan is for).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .data import REGION_BATCH, REGION_STREAM, BlockGrid
from .kernels import mix64

POLICY_FREE = "free"
POLICY_QUOTA = "quota"
POLICY_REGIONS = "regions"

PHASE_STATIC = "static"
PHASE_DYNAMIC = "dynamic"
PHASE_BARRIER = "barrier"

CLASS_STREAM = "stream"
CLASS_BATCH = "batch"


class SchedulerError(RuntimeError):
    """Protocol violation: double release, foreign lease, ..."""


@dataclass
class Unit:
    """One schedulable work item: a set of fine blocks in one column band
    sharing one (coarse) row group."""

    blocks: tuple          # fine block ids, ascending
    rows: tuple            # fine row bands covered
    col: int
    order_seed: int = 0
    size: int = 0          # triples covered, for trace/stats


@dataclass
class Lease:
    worker: int
    worker_class: str
    unit: Unit
    prefetch: Unit | None = None
    epoch: int = 0
    released: bool = False


@dataclass
class BalanceReport:
    """Snapshot of per-block update counts."""

    counts: np.ndarray
    max_min_ratio: float
    per_region_total: dict
    per_region_mean: dict
    histogram: np.ndarray


@dataclass
class TraceEvent:
    timestamp: float
    worker: int
    worker_class: str
    block: int
    phase: str


class GridScheduler:
    """Lease manager over one BlockGrid.

    max_epochs bounds the run; stop() ends it early.  With epoch_sync=True
    the scheduler parks at a barrier after each epoch until the driver
    calls resume() (workers block in acquire meanwhile); with False it
    rolls straight into the next epoch, which is what the unit tests and
    simulations use.
    """

    def __init__(self, grid: BlockGrid, policy: str, max_epochs: int,
                 seed: int = 0, epoch_sync: bool = False,
                 batch_prefetch: bool = True, trace: bool = False,
                 clock=time.perf_counter):
        if policy not in (POLICY_FREE, POLICY_QUOTA, POLICY_REGIONS):
            raise ValueError(f"unknown policy {policy!r}")
        if max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        self.grid = grid
        self.policy = policy
        self.max_epochs = max_epochs
        self.seed = seed
        self.epoch_sync = epoch_sync
        self.batch_prefetch = batch_prefetch
        self.clock = clock
        self._cond = threading.Condition()
        self._rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC0,)))

        n_rows = grid.n_row_bands
        n_cols = grid.n_col_bands
        self._n_cols = n_cols
        self.counts = np.zeros(grid.n_blocks, dtype=np.int64)
        self._done = np.zeros(grid.n_blocks, dtype=bool)
        self._row_holder = np.full(n_rows, -1, dtype=np.int64)
        self._row_depth = np.zeros(n_rows, dtype=np.int64)
        self._col_holder = np.full(n_cols, -1, dtype=np.int64)
        self._leases = {}

        if grid.sub_row_parent is None:
            parent = np.arange(n_rows, dtype=np.int64)
        else:
            parent = np.asarray(grid.sub_row_parent, dtype=np.int64)
        self._coarse_of_row = parent
        coarse_ids = np.unique(parent)
        self._rows_of_coarse = {int(c): tuple(int(r) for r in np.where(parent == c)[0])
                                for c in coarse_ids}
        self._region_of_row = np.asarray(grid.region_of_row, dtype=np.int8)
        self._region_of_coarse = {int(c): int(self._region_of_row[rows[0]])
                                  for c, rows in self._rows_of_coarse.items()}

        self._region_total = {
            REGION_STREAM: int(np.sum(self._region_blocks_mask(REGION_STREAM))),
            REGION_BATCH: int(np.sum(self._region_blocks_mask(REGION_BATCH))),
        }
        self._remaining = dict(self._region_total)

        self.phase = PHASE_STATIC
        self.epoch = 0
        self.total_block_epochs = 0
        self.total_updates = 0
        self._stopping = False
        self._terminated = False
        self._draining = False
        self.stop_reason = None
        self.trace_enabled = trace
        self.trace: list[TraceEvent] = []

    # -- geometry helpers -------------------------------------------------

    def _region_blocks_mask(self, region: int) -> np.ndarray:
        mask = np.zeros(self.grid.n_blocks, dtype=bool)
        for row in range(self.grid.n_row_bands):
            if self._region_of_row[row] == region:
                mask[row * self._n_cols:(row + 1) * self._n_cols] = True
        return mask

    def _block_region(self, block: int) -> int:
        return int(self._region_of_row[block // self._n_cols])

    def _unit_for(self, coarse: int, col: int, fine_row=None) -> Unit:
        if fine_row is not None:
            rows = (fine_row,)
        else:
            rows = self._rows_of_coarse[coarse]
        blocks = tuple(r * self._n_cols + col for r in rows)
        size = sum(self.grid.block_nnz(b) for b in blocks)
        return Unit(blocks=blocks, rows=rows, col=col, size=size)

    # -- candidate enumeration --------------------------------------------

    def _rows_free_for(self, rows, worker: int) -> bool:
        for r in rows:
            holder = self._row_holder[r]
            if holder != -1 and holder != worker:
                return False
        return True

    def _coarse_grain(self, region: int) -> bool:
        """Batch-region units are coarse while the phase is static."""
        return (self.policy == POLICY_REGIONS and region == REGION_BATCH
                and self.phase == PHASE_STATIC)

    def _units_in_region(self, region: int, require_undone: bool):
        units = []
        coarse_grain = self._coarse_grain(region)
        for coarse, rows in sorted(self._rows_of_coarse.items()):
            if self._region_of_coarse[coarse] != region:
                continue
            row_list = rows if not coarse_grain else (None,)
            for col in range(self._n_cols):
                if coarse_grain:
                    blocks = tuple(r * self._n_cols + col for r in rows)
                    if require_undone and any(self._done[b] for b in blocks):
                        continue
                    units.append((coarse, col, None))
                else:
                    for r in rows:
                        b = r * self._n_cols + col
                        if require_undone and self._done[b]:
                            continue
                        units.append((coarse, col, r))
        return units

    def _grantable(self, worker: int, specs, allow_shared_rows: bool):
        out = []
        for coarse, col, fine in specs:
            if self._col_holder[col] != -1:
                continue
            rows = (fine,) if fine is not None else self._rows_of_coarse[coarse]
            if allow_shared_rows:
                if not self._rows_free_for(rows, worker):
                    continue
            else:
                if any(self._row_holder[r] != -1 for r in rows):
                    continue
            out.append((coarse, col, fine))
        return out

    def _pick_least_updated(self, specs):
        """Minimum cumulative update count, seeded-uniform tie break."""
        best_key = None
        ties = []
        for spec in specs:
            coarse, col, fine = spec
            rows = (fine,) if fine is not None else self._rows_of_coarse[coarse]
            key = sum(int(self.counts[r * self._n_cols + col]) for r in rows)
            if best_key is None or key < best_key:
                best_key = key
                ties = [spec]
            elif key == best_key:
                ties.append(spec)
        if not ties:
            return None
        if len(ties) == 1:
            return ties[0]
        return ties[int(self._rng.integers(len(ties)))]

    def _regions_for(self, worker_class: str):
        own = REGION_BATCH if worker_class == CLASS_BATCH else REGION_STREAM
        other = REGION_STREAM if own == REGION_BATCH else REGION_BATCH
        if self.policy != POLICY_REGIONS:
            return [own]  # region tags are uniform outside regions policy
        if self.phase == PHASE_STATIC:
            return [own]
        return [own, other]

    def _select(self, worker: int, worker_class: str):
        require_undone = self.policy != POLICY_FREE
        if self.policy != POLICY_REGIONS:
            specs = self._units_in_region(REGION_STREAM, require_undone)
            specs += self._units_in_region(REGION_BATCH, require_undone)
            specs = self._grantable(worker, specs, allow_shared_rows=False)
            return self._pick_least_updated(specs)
        for region in self._regions_for(worker_class):
            specs = self._units_in_region(region, require_undone)
            specs = self._grantable(worker, specs, allow_shared_rows=False)
            pick = self._pick_least_updated(specs)
            if pick is not None:
                return pick
        return None

    def _select_prefetch(self, worker: int, primary: Unit):
        """A second unit on the primary's rows, in a free column."""
        require_undone = self.policy != POLICY_FREE
        coarse = int(self._coarse_of_row[primary.rows[0]])
        fine = primary.rows[0] if len(primary.rows) == 1 else None
        region = self._region_of_coarse[coarse]
        coarse_grain = self._coarse_grain(region)
        specs = []
        for col in range(self._n_cols):
            if col == primary.col:
                continue
            if coarse_grain and fine is None:
                blocks = tuple(r * self._n_cols + col for r in primary.rows)
                if require_undone and any(self._done[b] for b in blocks):
                    continue
                specs.append((coarse, col, None))
            else:
                b = primary.rows[0] * self._n_cols + col
                if len(primary.rows) != 1:
                    continue
                if require_undone and self._done[b]:
                    continue
                specs.append((coarse, col, primary.rows[0]))
        specs = self._grantable(worker, specs, allow_shared_rows=True)
        return self._pick_least_updated(specs)

    # -- occupancy ---------------------------------------------------------

    def _occupy(self, worker: int, unit: Unit) -> None:
        for r in unit.rows:
            self._row_holder[r] = worker
            self._row_depth[r] += 1
        self._col_holder[unit.col] = worker

    def _vacate(self, unit: Unit) -> None:
        for r in unit.rows:
            self._row_depth[r] -= 1
            if self._row_depth[r] == 0:
                self._row_holder[r] = -1
        self._col_holder[unit.col] = -1

    def _stamp(self, unit: Unit) -> Unit:
        lead = unit.blocks[0]
        unit.order_seed = mix64(self.seed, lead, int(self.counts[lead]))
        return unit

    def _log(self, worker: int, worker_class: str, unit: Unit) -> None:
        if self.trace_enabled:
            self.trace.append(TraceEvent(self.clock(), worker, worker_class,
                                         unit.blocks[0], self.phase))

    # -- public protocol ----------------------------------------------------

    def acquire(self, worker: int, worker_class: str, blocking: bool = True):
        """Grant a lease, waiting until one is available (or the run ends).

        With blocking=False, returns None immediately when nothing is
        grantable; used by single-threaded drivers and tests.
        """
        with self._cond:
            while True:
                if self._terminated or self._stopping:
                    return None
                if worker in self._leases:
                    raise SchedulerError(f"worker {worker} already holds a lease")
                if not (self._draining or self.phase == PHASE_BARRIER):
                    pick = self._select(worker, worker_class)
                    if pick is not None:
                        coarse, col, fine = pick
                        unit = self._stamp(self._unit_for(coarse, col, fine))
                        lease = Lease(worker=worker, worker_class=worker_class,
                                      unit=unit, epoch=self.epoch)
                        self._occupy(worker, unit)
                        if worker_class == CLASS_BATCH and self.batch_prefetch:
                            pre = self._select_prefetch(worker, unit)
                            if pre is not None:
                                pcoarse, pcol, pfine = pre
                                punit = self._stamp(self._unit_for(pcoarse, pcol, pfine))
                                self._occupy(worker, punit)
                                lease.prefetch = punit
                        self._leases[worker] = lease
                        self._log(worker, worker_class, unit)
                        return lease
                if not blocking:
                    return None
                self._cond.wait()

    def release(self, lease: Lease, processed: int):
        """Finish a lease: bump counts, free occupancy, run transitions.

        Returns the successor lease when the released lease carried a
        staged-ahead unit (promoted to primary, with a fresh staged-ahead
        grant attempted), else None.
        """
        with self._cond:
            if lease.released or self._leases.get(lease.worker) is not lease:
                raise SchedulerError(f"worker {lease.worker} released a lease "
                                     "it does not hold")
            lease.released = True
            del self._leases[lease.worker]
            for b in lease.unit.blocks:
                self.counts[b] += 1
                if not self._done[b]:
                    self._done[b] = True
                    self._remaining[self._block_region(b)] -= 1
            self.total_block_epochs += len(lease.unit.blocks)
            self.total_updates += processed
            self._vacate(lease.unit)

            successor = None
            if lease.prefetch is not None:
                if self._stopping or self._draining:
                    self._vacate(lease.prefetch)
                else:
                    unit = lease.prefetch
                    successor = Lease(worker=lease.worker,
                                      worker_class=lease.worker_class,
                                      unit=unit, epoch=self.epoch)
                    self._leases[lease.worker] = successor
                    pre = self._select_prefetch(lease.worker, unit)
                    if pre is not None:
                        pcoarse, pcol, pfine = pre
                        punit = self._stamp(self._unit_for(pcoarse, pcol, pfine))
                        self._occupy(lease.worker, punit)
                        successor.prefetch = punit
                    self._log(lease.worker, lease.worker_class, unit)

            self._after_release()
            self._cond.notify_all()
            return successor

    def _after_release(self) -> None:
        if self._stopping:
            if not self._leases:
                self._terminated = True
            return
        if self.policy == POLICY_FREE:
            target = (self.epoch + 1) * self.grid.n_blocks
            if self.total_block_epochs >= target:
                if self.epoch_sync:
                    # quiesce so the driver can sample metrics safely
                    self._draining = True
                else:
                    self.epoch += 1
                    if self.epoch >= self.max_epochs:
                        self._stopping = True
                        if not self._leases:
                            self._terminated = True
            if self._draining and not self._leases:
                self._complete_epoch()
            return
        if self.policy == POLICY_REGIONS and self.phase == PHASE_STATIC:
            for region in (REGION_BATCH, REGION_STREAM):
                other = REGION_STREAM if region == REGION_BATCH else REGION_BATCH
                if (self._region_total[region] and self._remaining[region] == 0
                        and self._remaining[other] > 0):
                    self.enter_dynamic_phase(region)
                    break
        if all(v == 0 for k, v in self._remaining.items() if self._region_total[k]):
            self._complete_epoch()

    def enter_dynamic_phase(self, exhausted_region: int) -> None:
        """Switch to fine-grained stealing once one region runs dry.

        Safe to call from tests directly; during a run it fires from the
        release path under the lock.
        """
        self.phase = PHASE_DYNAMIC

    def _complete_epoch(self) -> None:
        self.epoch += 1
        if self._stopping or self.epoch >= self.max_epochs:
            self._terminated = True
            self._cond.notify_all()
            return
        if self.epoch_sync:
            self.phase = PHASE_BARRIER
            self._cond.notify_all()
        else:
            self._reset_epoch()

    def _reset_epoch(self) -> None:
        self._done[:] = False
        self._remaining = dict(self._region_total)
        self._draining = False
        self.phase = PHASE_STATIC

    # -- driver-side control -------------------------------------------------

    def wait_epoch_end(self):
        """Block until the scheduler parks at a barrier or terminates.

        Returns (epoch, terminated).  Only meaningful with epoch_sync=True.
        """
        with self._cond:
            while not (self._terminated or self.phase == PHASE_BARRIER):
                self._cond.wait()
            return self.epoch, self._terminated

    def resume(self) -> None:
        """Leave the barrier and start the next epoch."""
        with self._cond:
            if self._terminated:
                return
            if self.phase != PHASE_BARRIER:
                raise SchedulerError("resume() outside an epoch barrier")
            self._reset_epoch()
            self._cond.notify_all()

    def stop(self, reason: str | None = None) -> None:
        """Request graceful termination; outstanding leases drain first."""
        with self._cond:
            if self._terminated:
                return
            self._stopping = True
            self.stop_reason = reason
            if not self._leases:
                self._terminated = True
            self._cond.notify_all()

    def abort(self, reason: str | None = None) -> None:
        """Hard stop: terminate even with leases outstanding.

        For worker failures, where the holder of a lease is gone and a
        graceful drain would wait forever.
        """
        with self._cond:
            self._stopping = True
            self._terminated = True
            if self.stop_reason is None:
                self.stop_reason = reason
            self._cond.notify_all()

    @property
    def terminated(self) -> bool:
        with self._cond:
            return self._terminated

    def outstanding(self) -> int:
        with self._cond:
            return len(self._leases)

    def grantable_blocks(self, worker: int, worker_class: str) -> set:
        """Fine block ids a fresh primary lease could cover right now.

        Diagnostic view of the independence rule; does not consume anything.
        """
        with self._cond:
            require_undone = self.policy != POLICY_FREE
            if self.policy != POLICY_REGIONS:
                specs = self._units_in_region(REGION_STREAM, require_undone)
                specs += self._units_in_region(REGION_BATCH, require_undone)
            else:
                specs = []
                for region in self._regions_for(worker_class):
                    specs += self._units_in_region(region, require_undone)
            specs = self._grantable(worker, specs, allow_shared_rows=False)
            blocks = set()
            for coarse, col, fine in specs:
                rows = (fine,) if fine is not None else self._rows_of_coarse[coarse]
                blocks.update(r * self._n_cols + col for r in rows)
            return blocks

    # -- reporting -------------------------------------------------------------

    def imbalance_report(self) -> BalanceReport:
        with self._cond:
            counts = self.counts.copy()
        lo = max(int(counts.min()) if len(counts) else 0, 1)
        hi = int(counts.max()) if len(counts) else 0
        per_total, per_mean = {}, {}
        for region, name in ((REGION_STREAM, "stream"), (REGION_BATCH, "batch")):
            mask = self._region_blocks_mask(region)
            if mask.any():
                per_total[name] = int(counts[mask].sum())
                per_mean[name] = float(counts[mask].mean())
        return BalanceReport(counts=counts,
                             max_min_ratio=hi / lo if hi else 1.0,
                             per_region_total=per_total,
                             per_region_mean=per_mean,
                             histogram=np.bincount(counts) if len(counts) else np.zeros(1, np.int64))

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("timestamp,worker,class,block,phase\n")
            for ev in self.trace:
                fh.write(f"{ev.timestamp:.9f},{ev.worker},{ev.worker_class},"
                         f"{ev.block},{ev.phase}\n")
