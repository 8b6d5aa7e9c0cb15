"""Worker runtimes: plain stream workers and staged batch workers.

A stream worker is one thread applying block epochs directly to the shared
factor matrices; its throughput is essentially independent of block size.

A batch worker emulates an accelerator.  Work reaches it through a staging
pipeline: (1) stage-in copies a block's triples and the touched item-factor
columns into private buffers, charged an emulated latency of
max(launch_overhead, bytes / bandwidth); (2) compute lanes run the update
kernel concurrently against the staged buffers, lock-free per component
(last writer wins); (3) stage-out writes the item columns back.  While the
lanes compute one block, a stager thread copies in the next (staged-ahead)
block; the lease already guarantees that block is conflict-free, and it
shares the current row band, so the worker keeps that band's user factors
resident and flushes them only when it moves to a different band.  That
residency is what makes consecutive same-row blocks see each other's user
updates without a round trip through the shared matrices.

With one lane and zero overhead a batch worker degenerates to a stream
worker: same kernel, same per-block order seeds, bitwise-identical results
over the same lease sequence.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import BlockGrid
from .scheduler import CLASS_BATCH, CLASS_STREAM, GridScheduler, Unit
from .sgd import FactorModel, Hyperparams, init_model

TRIPLE_BYTES = 16  # int32 row + int32 col + float64 value


@dataclass
class StreamWorkerConfig:
    worker_id: int


@dataclass
class BatchWorkerConfig:
    lanes: int = 4                     # inner compute lanes
    launch_overhead: float = 0.002     # seconds, stage-in latency floor
    bandwidth: float = 4e9             # bytes/second emulated copy rate
    pipeline_depth: int = 3            # stage-in, compute, stage-out

    def validate(self) -> None:
        if self.lanes < 1:
            raise ValueError("lanes must be >= 1")
        if self.launch_overhead < 0:
            raise ValueError("launch_overhead must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")


def _emulate(start: float, floor_seconds: float) -> float:
    """Pad the elapsed time since `start` up to an emulated floor.

    Sleeps for the bulk and spins the last slice; time.sleep alone can
    overshoot sub-millisecond requests badly.
    """
    target = start + floor_seconds
    while True:
        now = time.perf_counter()
        remaining = target - now
        if remaining <= 0:
            return now - start
        if remaining > 0.0015:
            time.sleep(remaining - 0.001)


def block_order_seed(unit_seed: int, index: int) -> int:
    """Visit-order seed of sub-block `index` within a leased unit.

    Stream and batch paths must derive seeds identically or their results
    could not be compared bitwise.
    """
    return kernels.mix64(unit_seed, index)


class _Lane(threading.Thread):
    """Persistent helper thread; cheaper to signal than spawning per block."""

    def __init__(self, name):
        super().__init__(name=name, daemon=True)
        self._go = threading.Event()
        self._done = threading.Event()
        self._job = None
        self._quit = False
        self.result = None
        self.error = None
        self.start()

    def run(self):
        while True:
            self._go.wait()
            self._go.clear()
            if self._quit:
                return
            try:
                self.result = self._job()
            except BaseException as exc:  # re-raised by the owning worker
                self.error = exc
            self._done.set()

    def submit(self, job):
        self.result = None
        self.error = None
        self._job = job
        self._done.clear()
        self._go.set()

    def wait(self):
        self._done.wait()
        if self.error is not None:
            raise self.error
        return self.result

    def shutdown(self):
        self._quit = True
        self._go.set()


class StagedBlock:
    """Private copies of one unit's triples and item-factor columns."""

    __slots__ = ("rows", "cols", "vals", "offsets", "col_lo", "col_hi", "items")

    def __init__(self, rows, cols, vals, offsets, col_lo, col_hi, items):
        self.rows = rows
        self.cols = cols
        self.vals = vals
        self.offsets = offsets      # sub-block boundaries within the arrays
        self.col_lo = col_lo
        self.col_hi = col_hi
        self.items = items


class BatchEngine:
    """Staging buffers plus compute lanes, independent of any scheduler.

    Used by the batch worker thread and by calibration, which times the
    three stages on standalone workloads.
    """

    def __init__(self, config: BatchWorkerConfig, model: FactorModel,
                 hparams: Hyperparams):
        config.validate()
        self.config = config
        self.model = model
        self.hparams = hparams
        self._lanes = [_Lane(f"lane-{i}") for i in range(config.lanes - 1)]
        self._stager = _Lane("stager")
        self.resident = None     # (row_lo, row_hi, user-factor buffer)
        self.staged = {}         # unit key -> StagedBlock

    def close(self):
        for lane in self._lanes:
            lane.shutdown()
        self._stager.shutdown()

    # -- staging -----------------------------------------------------------

    def stage_rows(self, row_lo: int, row_hi: int) -> float:
        """Copy one user-factor band into the resident buffer."""
        start = time.perf_counter()
        buf = self.model.user_factors[row_lo:row_hi].copy()
        self.resident = (row_lo, row_hi, buf)
        return _emulate(start, buf.nbytes / self.config.bandwidth)

    def flush_rows(self) -> float:
        """Write the resident user-factor band back to the shared matrix."""
        if self.resident is None:
            return 0.0
        start = time.perf_counter()
        row_lo, row_hi, buf = self.resident
        self.model.user_factors[row_lo:row_hi] = buf
        self.resident = None
        return _emulate(start, buf.nbytes / self.config.bandwidth)

    def stage_in(self, key, grid: BlockGrid, unit: Unit) -> float:
        """Stage one unit: triples plus the touched item columns.

        Charged max(launch_overhead, bytes / bandwidth).
        """
        start = time.perf_counter()
        spans = [grid.block_range(b) for b in unit.blocks]
        rows = np.concatenate([grid.users[lo:hi] for lo, hi in spans])
        cols = np.concatenate([grid.items[lo:hi] for lo, hi in spans])
        vals = np.concatenate([grid.ratings[lo:hi] for lo, hi in spans])
        offsets = np.concatenate([[0], np.cumsum([hi - lo for lo, hi in spans])])
        col_lo, col_hi = grid.col_span(unit.col)
        items = self.model.item_factors[col_lo:col_hi].copy()
        self.staged[key] = StagedBlock(rows, cols, vals, offsets, col_lo, col_hi, items)
        nbytes = len(vals) * TRIPLE_BYTES + items.nbytes
        return _emulate(start, max(self.config.launch_overhead,
                                   nbytes / self.config.bandwidth))

    def stage_in_async(self, key, grid: BlockGrid, unit: Unit):
        """Stage on the stager thread; returns a join callable.

        The copy only reads factor regions leased to this worker, so it can
        safely overlap compute on the previous block.
        """
        self._stager.submit(lambda: self.stage_in(key, grid, unit))
        return self._stager.wait

    def stage_out(self, key) -> float:
        """Write the staged item columns back to the shared factors."""
        staged = self.staged.pop(key)
        start = time.perf_counter()
        self.model.item_factors[staged.col_lo:staged.col_hi] = staged.items
        return _emulate(start, staged.items.nbytes / self.config.bandwidth)

    # -- compute -----------------------------------------------------------

    def compute(self, key, unit_seed: int) -> int:
        """Apply every staged triple once; lanes split each sub-block.

        Sub-blocks run in sequence with the same order seeds a stream
        worker would use; lanes chunk the triples of one sub-block and race
        benignly on the staged factors.
        """
        staged = self.staged[key]
        row_lo, _, user_buf = self.resident
        hp = self.hparams
        lanes = self.config.lanes
        done = 0
        for i in range(len(staged.offsets) - 1):
            lo = int(staged.offsets[i])
            hi = int(staged.offsets[i + 1])
            seed = block_order_seed(unit_seed, i)
            n = hi - lo
            if lanes == 1 or n < 2 * lanes:
                done += kernels.sgd_range(user_buf, staged.items, staged.rows,
                                          staged.cols, staged.vals, lo, hi,
                                          hp.learning_rate, hp.reg_user,
                                          hp.reg_item, seed, row_lo, staged.col_lo)
                continue
            bounds = [lo + (n * j) // lanes for j in range(lanes + 1)]
            jobs = []
            for j in range(lanes):
                jobs.append(self._chunk_job(user_buf, staged, bounds[j], bounds[j + 1],
                                            kernels.mix64(seed, j), row_lo))
            for lane, job in zip(self._lanes, jobs[1:]):
                lane.submit(job)
            done += jobs[0]()
            for lane in self._lanes[:len(jobs) - 1]:
                done += lane.wait()
        return done

    def _chunk_job(self, user_buf, staged, lo, hi, seed, row_lo):
        hp = self.hparams

        def job():
            return kernels.sgd_range(user_buf, staged.items, staged.rows,
                                     staged.cols, staged.vals, lo, hi,
                                     hp.learning_rate, hp.reg_user, hp.reg_item,
                                     seed, row_lo, staged.col_lo)

        return job


class StreamWorker(threading.Thread):
    """acquire -> block epoch -> release, until the scheduler ends the run."""

    def __init__(self, worker_id: int, scheduler: GridScheduler,
                 model: FactorModel, grid: BlockGrid, hparams: Hyperparams):
        super().__init__(name=f"stream-{worker_id}", daemon=True)
        self.worker_id = worker_id
        self.scheduler = scheduler
        self.model = model
        self.grid = grid
        self.hparams = hparams
        self.blocks_done = 0
        self.error = None

    def run(self):
        try:
            hp = self.hparams
            while True:
                lease = self.scheduler.acquire(self.worker_id, CLASS_STREAM)
                if lease is None:
                    return
                done = 0
                for i, block in enumerate(lease.unit.blocks):
                    lo, hi = self.grid.block_range(block)
                    done += kernels.sgd_range(
                        self.model.user_factors, self.model.item_factors,
                        self.grid.users, self.grid.items, self.grid.ratings,
                        lo, hi, hp.learning_rate, hp.reg_user, hp.reg_item,
                        block_order_seed(lease.unit.order_seed, i), 0, 0)
                self.blocks_done += len(lease.unit.blocks)
                self.scheduler.release(lease, done)
        except BaseException as exc:
            self.error = exc
            self.scheduler.abort("worker error")


class BatchWorker(threading.Thread):
    """Pipelined batch runtime driving a BatchEngine through leases."""

    def __init__(self, worker_id: int, scheduler: GridScheduler,
                 model: FactorModel, grid: BlockGrid, hparams: Hyperparams,
                 config: BatchWorkerConfig):
        super().__init__(name=f"batch-{worker_id}", daemon=True)
        self.worker_id = worker_id
        self.scheduler = scheduler
        self.grid = grid
        self.engine = BatchEngine(config, model, hparams)
        self.blocks_done = 0
        self.error = None

    def _row_span(self, unit: Unit):
        lo = self.grid.row_span(unit.rows[0])[0]
        hi = self.grid.row_span(unit.rows[-1])[1]
        return lo, hi

    def _ensure_resident(self, unit: Unit) -> None:
        span = self._row_span(unit)
        if self.engine.resident is None or self.engine.resident[:2] != span:
            self.engine.flush_rows()
            self.engine.stage_rows(*span)

    def run(self):
        engine = self.engine
        try:
            lease = self.scheduler.acquire(self.worker_id, CLASS_BATCH)
            if lease is None:
                return
            self._ensure_resident(lease.unit)
            engine.stage_in(id(lease.unit), self.grid, lease.unit)
            while True:
                unit = lease.unit
                join_stage = None
                if lease.prefetch is not None and id(lease.prefetch) not in engine.staged:
                    join_stage = engine.stage_in_async(id(lease.prefetch),
                                                       self.grid, lease.prefetch)
                done = engine.compute(id(unit), unit.order_seed)
                if join_stage is not None:
                    join_stage()
                engine.stage_out(id(unit))
                self.blocks_done += len(unit.blocks)
                if lease.prefetch is None:
                    # next primary may land on another row band
                    engine.flush_rows()
                nxt = self.scheduler.release(lease, done)
                if nxt is None:
                    engine.staged.clear()
                    nxt = self.scheduler.acquire(self.worker_id, CLASS_BATCH)
                    if nxt is None:
                        break
                self._ensure_resident(nxt.unit)
                if id(nxt.unit) not in engine.staged:
                    engine.stage_in(id(nxt.unit), self.grid, nxt.unit)
                lease = nxt
        except BaseException as exc:
            self.error = exc
            self.scheduler.abort("worker error")
        finally:
            try:
                engine.flush_rows()
            finally:
                engine.close()


# -- calibration / benchmarking helpers ------------------------------------


def time_stream_prefixes(matrix, prefixes, repeats, hparams: Hyperparams,
                         seed: int):
    """Mean wall time of a single-thread epoch over each prefix workload."""
    kernels.warmup(hparams.n_factors)
    times = []
    for size in prefixes:
        elapsed = 0.0
        for rep in range(repeats):
            model = init_model(matrix.n_users, matrix.n_items, hparams,
                               kernels.mix64(seed, size, rep))
            t0 = time.perf_counter()
            kernels.sgd_range(model.user_factors, model.item_factors,
                              matrix.users, matrix.items, matrix.ratings,
                              0, size, hparams.learning_rate, hparams.reg_user,
                              hparams.reg_item, kernels.mix64(seed, size, rep, 1),
                              0, 0)
            elapsed += time.perf_counter() - t0
        times.append(elapsed / repeats)
    return times


class _WholeMatrixUnit:
    """Minimal grid/unit pair treating a triple prefix as one block."""

    def __init__(self, matrix, size):
        from .data import build_grid
        sub = type(matrix)(matrix.n_users, matrix.n_items,
                           matrix.users[:size], matrix.items[:size],
                           matrix.ratings[:size])
        self.grid = build_grid(sub, [0, matrix.n_users], [0, matrix.n_items])
        self.unit = Unit(blocks=(0,), rows=(0,), col=0, size=size)


def time_batch_prefixes(matrix, prefixes, repeats, hparams: Hyperparams,
                        config: BatchWorkerConfig, seed: int):
    """Per-stage mean wall times of the batch engine on each prefix.

    The three stages are timed separately (no overlap): the steady-state
    pipelined cost of the batch side is the max of the stage costs, so each
    stage needs its own curve.
    """
    kernels.warmup(hparams.n_factors)
    stages = {"transfer_in": [], "kernel": [], "transfer_out": []}
    for size in prefixes:
        work = _WholeMatrixUnit(matrix, size)
        t_in = t_k = t_out = 0.0
        for rep in range(repeats):
            model = init_model(matrix.n_users, matrix.n_items, hparams,
                               kernels.mix64(seed, size, rep, 2))
            engine = BatchEngine(config, model, hparams)
            try:
                t0 = time.perf_counter()
                engine.stage_rows(0, matrix.n_users)
                engine.stage_in("cal", work.grid, work.unit)
                t_in += time.perf_counter() - t0

                t0 = time.perf_counter()
                engine.compute("cal", kernels.mix64(seed, size, rep, 3))
                t_k += time.perf_counter() - t0

                t0 = time.perf_counter()
                engine.stage_out("cal")
                engine.flush_rows()
                t_out += time.perf_counter() - t0
            finally:
                engine.close()
        stages["transfer_in"].append(t_in / repeats)
        stages["kernel"].append(t_k / repeats)
        stages["transfer_out"].append(t_out / repeats)
    return stages


def throughput_sweep(worker_class: str, sizes, repeats: int = 3, *,
                     hparams: Hyperparams | None = None,
                     batch_config: BatchWorkerConfig | None = None,
                     n_rows: int = 4096, n_cols: int = 4096, seed: int = 0):
    """Elements/second per workload size, on synthetic single-block data.

    Returns a list of dicts; batch entries carry per-stage seconds too.
    Each size reports the fastest of `repeats` runs, the stable estimate on
    machines with background load.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    hparams = hparams or Hyperparams()
    kernels.warmup(hparams.n_factors)
    from .data import RatingMatrix
    rng = np.random.default_rng(seed)
    out = []
    for size in sizes:
        rows = rng.integers(0, n_rows, size=size).astype(np.int32)
        cols = rng.integers(0, n_cols, size=size).astype(np.int32)
        vals = rng.normal(size=size)
        matrix = RatingMatrix(n_rows, n_cols, rows, cols, vals)
        if worker_class == CLASS_STREAM:
            best = None
            for rep in range(repeats):
                model = init_model(n_rows, n_cols, hparams, kernels.mix64(seed, size, rep))
                t0 = time.perf_counter()
                kernels.sgd_range(model.user_factors, model.item_factors,
                                  rows, cols, vals, 0, size,
                                  hparams.learning_rate, hparams.reg_user,
                                  hparams.reg_item, kernels.mix64(rep, size), 0, 0)
                el = time.perf_counter() - t0
                best = el if best is None else min(best, el)
            out.append({"size": size, "seconds": best,
                        "elements_per_second": size / best})
        elif worker_class == CLASS_BATCH:
            if batch_config is None:
                raise ValueError("batch sweeps need a BatchWorkerConfig")
            work = _WholeMatrixUnit(matrix, size)
            best = None
            for rep in range(repeats):
                model = init_model(n_rows, n_cols, hparams,
                                   kernels.mix64(seed, size, rep, 4))
                engine = BatchEngine(batch_config, model, hparams)
                try:
                    t0 = time.perf_counter()
                    engine.stage_rows(0, n_rows)
                    t_in = engine.stage_in("s", work.grid, work.unit)
                    t1 = time.perf_counter()
                    engine.compute("s", kernels.mix64(rep, size, 5))
                    t_kernel = time.perf_counter() - t1
                    t2 = time.perf_counter()
                    engine.stage_out("s")
                    engine.flush_rows()
                    t_out = time.perf_counter() - t2
                    total = time.perf_counter() - t0
                finally:
                    engine.close()
                entry = {"size": size, "seconds": total,
                         "elements_per_second": size / total,
                         "stage_in_seconds": t_in, "kernel_seconds": t_kernel,
                         "stage_out_seconds": t_out}
                if best is None or total < best["seconds"]:
                    best = entry
            out.append(best)
        else:
            raise ValueError(f"unknown worker class {worker_class!r}")
    return out
