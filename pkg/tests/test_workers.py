import numpy as np
import pytest

from hetmf import kernels
from hetmf.costmodel import DeviceTopology
from hetmf.data import build_grid, shuffle_triples, synthetic_ratings
from hetmf.partition import nonuniform_plan, uniform_plan
from hetmf.scheduler import (CLASS_BATCH, CLASS_STREAM, POLICY_QUOTA,
                             POLICY_REGIONS, GridScheduler, Unit)
from hetmf.sgd import Hyperparams, init_model
from hetmf.workers import (BatchEngine, BatchWorker, BatchWorkerConfig,
                           StreamWorker, block_order_seed, throughput_sweep)

from conftest import random_matrix


def hp(k=4, reg=0.01, lr=0.02):
    return Hyperparams(n_factors=k, reg_user=reg, reg_item=reg, learning_rate=lr)


def quota_grid(rows, cols, n=40, seed=0):
    m = random_matrix(n, n, n * n // 3, seed)
    return build_grid(m, np.linspace(0, n, rows + 1, dtype=int),
                      np.linspace(0, n, cols + 1, dtype=int))


def fast_batch_config(lanes=1):
    return BatchWorkerConfig(lanes=lanes, launch_overhead=0.0, bandwidth=1e12)


class TestStreamWorker:
    def test_single_worker_block_count(self):
        grid = quota_grid(1, 2, seed=1)
        sched = GridScheduler(grid, POLICY_QUOTA, max_epochs=1, seed=1)
        model = init_model(grid.n_rows, grid.n_cols, hp(), 1)
        worker = StreamWorker(0, sched, model, grid, hp())
        worker.start()
        worker.join(timeout=30)
        assert not worker.is_alive()
        assert worker.error is None
        assert worker.blocks_done == 2

    def test_two_workers_match_serial_replay(self):
        # record the lease grant order of a threaded run, then replay the
        # same blocks serially; disjoint leases commute, so the results
        # must agree bitwise
        grid = quota_grid(2, 3, n=60, seed=2)
        params = hp()
        sched = GridScheduler(grid, POLICY_QUOTA, max_epochs=4, seed=2, trace=True)
        model = init_model(grid.n_rows, grid.n_cols, params, 2)
        workers = [StreamWorker(i, sched, model, grid, params) for i in range(2)]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=60)
            assert w.error is None

        replay = init_model(grid.n_rows, grid.n_cols, params, 2)
        counts = np.zeros(grid.n_blocks, dtype=int)
        for event in sched.trace:
            block = event.block
            unit_seed = kernels.mix64(2, block, counts[block])
            lo, hi = grid.block_range(block)
            kernels.sgd_range(replay.user_factors, replay.item_factors,
                              grid.users, grid.items, grid.ratings, lo, hi,
                              params.learning_rate, params.reg_user,
                              params.reg_item, block_order_seed(unit_seed, 0), 0, 0)
            counts[block] += 1
        assert np.array_equal(replay.user_factors, model.user_factors)
        assert np.array_equal(replay.item_factors, model.item_factors)


class TestBatchEngine:
    def test_staging_round_trip_leaves_factors_unchanged(self):
        grid = quota_grid(1, 1, n=20, seed=3)
        model = init_model(20, 20, hp(), 3)
        before_u = model.user_factors.copy()
        before_i = model.item_factors.copy()
        engine = BatchEngine(fast_batch_config(), model, hp())
        try:
            engine.stage_rows(0, 20)
            engine.stage_in("k", grid, Unit(blocks=(0,), rows=(0,), col=0))
            engine.stage_out("k")
            engine.flush_rows()
        finally:
            engine.close()
        assert np.array_equal(model.user_factors, before_u)
        assert np.array_equal(model.item_factors, before_i)

    def test_stage_in_floor_honored(self):
        import time
        grid = quota_grid(1, 1, n=20, seed=4)
        model = init_model(20, 20, hp(), 4)
        engine = BatchEngine(BatchWorkerConfig(lanes=1, launch_overhead=0.02,
                                               bandwidth=1e12), model, hp())
        try:
            t0 = time.perf_counter()
            engine.stage_in("k", grid, Unit(blocks=(0,), rows=(0,), col=0))
            elapsed = time.perf_counter() - t0
        finally:
            engine.close()
        assert elapsed >= 0.02

    def test_overlapped_stage_does_not_see_compute(self):
        # stage-in of the next block runs while lanes compute the current
        # one; the staged item columns must match the shared factors from
        # before, since compute only writes private buffers
        grid = quota_grid(1, 2, n=30, seed=5)
        model = init_model(30, 30, hp(), 5)
        engine = BatchEngine(fast_batch_config(lanes=2), model, hp())
        try:
            engine.stage_rows(0, 30)
            u0 = Unit(blocks=(0,), rows=(0,), col=0)
            u1 = Unit(blocks=(1,), rows=(0,), col=1)
            engine.stage_in(id(u0), grid, u0)
            col_lo, col_hi = grid.col_span(1)
            expected = model.item_factors[col_lo:col_hi].copy()
            join = engine.stage_in_async(id(u1), grid, u1)
            engine.compute(id(u0), 99)
            join()
            assert np.array_equal(engine.staged[id(u1)].items, expected)
        finally:
            engine.close()

    def test_lanes_cover_all_triples(self):
        # vanishing step: total delta equals the per-triple gradient sum,
        # so dropped or doubled chunks would show up immediately
        grid = quota_grid(1, 1, n=24, seed=6)
        lr = 1e-12
        params = Hyperparams(4, 0.0, 0.0, lr)
        model = init_model(24, 24, params, 6)
        p0 = model.user_factors.copy()
        q0 = model.item_factors.copy()
        engine = BatchEngine(fast_batch_config(lanes=3), model, params)
        try:
            engine.stage_rows(0, 24)
            unit = Unit(blocks=(0,), rows=(0,), col=0)
            engine.stage_in(id(unit), grid, unit)
            done = engine.compute(id(unit), 7)
            engine.stage_out(id(unit))
            engine.flush_rows()
        finally:
            engine.close()
        assert done == grid.block_nnz(0)
        exp_dp = np.zeros_like(p0)
        exp_dq = np.zeros_like(q0)
        for u, v, r in zip(grid.users, grid.items, grid.ratings):
            e = r - float(np.dot(p0[u], q0[v]))
            exp_dp[u] += lr * e * q0[v]
            exp_dq[v] += lr * e * p0[u]
        assert model.user_factors - p0 == pytest.approx(exp_dp, rel=1e-6)
        assert model.item_factors - q0 == pytest.approx(exp_dq, rel=1e-6)


class TestDegenerateEquivalence:
    def run_class(self, worker_cls, grid, params, seed, **kwargs):
        sched = GridScheduler(grid, POLICY_QUOTA, max_epochs=3, seed=seed,
                              batch_prefetch=kwargs.pop("prefetch", False))
        model = init_model(grid.n_rows, grid.n_cols, params, seed)
        if worker_cls is BatchWorker:
            worker = BatchWorker(0, sched, model, grid, params, fast_batch_config())
        else:
            worker = StreamWorker(0, sched, model, grid, params)
        worker.start()
        worker.join(timeout=60)
        assert worker.error is None
        return model

    def test_batch_one_lane_equals_stream_bitwise(self):
        grid = quota_grid(2, 3, n=48, seed=7)
        params = hp()
        stream_model = self.run_class(StreamWorker, grid, params, seed=7)
        batch_model = self.run_class(BatchWorker, grid, params, seed=7)
        assert np.array_equal(stream_model.user_factors, batch_model.user_factors)
        assert np.array_equal(stream_model.item_factors, batch_model.item_factors)

    def test_equivalence_holds_with_prefetch_pipeline(self):
        grid = quota_grid(1, 2, n=30, seed=8)
        params = hp()
        stream_model = self.run_class(StreamWorker, grid, params, seed=8)
        batch_model = self.run_class(BatchWorker, grid, params, seed=8, prefetch=True)
        assert np.array_equal(stream_model.user_factors, batch_model.user_factors)
        assert np.array_equal(stream_model.item_factors, batch_model.item_factors)


class TestRegionsRun:
    def test_mixed_pool_trains_nonuniform_grid(self):
        matrix = shuffle_triples(
            synthetic_ratings(90, 90, rank=4, density=0.2, noise=0.1, seed=9), 9)
        plan = nonuniform_plan(DeviceTopology(2, 1), 0.4, matrix)
        grid = build_grid(matrix, plan.row_cuts, plan.col_cuts,
                          plan.region_of_row, plan.sub_row_parent)
        sched = GridScheduler(grid, POLICY_REGIONS, max_epochs=3, seed=9)
        params = hp()
        model = init_model(90, 90, params, 9)
        workers = [StreamWorker(0, sched, model, grid, params),
                   StreamWorker(1, sched, model, grid, params),
                   BatchWorker(2, sched, model, grid, params,
                               BatchWorkerConfig(lanes=2, launch_overhead=0.0005,
                                                 bandwidth=2e9))]
        for w in workers:
            w.start()
        for w in workers:
            w.join(timeout=120)
            assert w.error is None
        assert sched.epoch == 3
        assert np.all(sched.counts == 3)
        assert model.all_finite()


class TestThroughputSweep:
    def test_stream_sweep_entries(self):
        out = throughput_sweep(CLASS_STREAM, [1000, 2000], repeats=3,
                               hparams=hp(), n_rows=512, n_cols=512)
        assert [row["size"] for row in out] == [1000, 2000]
        for row in out:
            assert row["elements_per_second"] > 0

    def test_batch_sweep_reports_stages(self):
        out = throughput_sweep(CLASS_BATCH, [1000, 4000], repeats=3,
                               hparams=hp(),
                               batch_config=BatchWorkerConfig(
                                   lanes=2, launch_overhead=0.002, bandwidth=1e9),
                               n_rows=512, n_cols=512)
        for row in out:
            assert row["stage_in_seconds"] >= 0.002
            assert row["kernel_seconds"] > 0
            assert row["stage_out_seconds"] > 0
            assert row["seconds"] >= row["stage_in_seconds"]

    def test_sizes_must_ascend(self):
        with pytest.raises(ValueError):
            throughput_sweep(CLASS_STREAM, [2000, 1000], hparams=hp())

    def test_launch_overhead_starves_small_blocks(self):
        # a 10 ms floor caps tiny-block throughput at size / 0.01
        out = throughput_sweep(CLASS_BATCH, [1000, 100_000], repeats=3,
                               hparams=hp(),
                               batch_config=BatchWorkerConfig(
                                   lanes=2, launch_overhead=0.01, bandwidth=4e9),
                               n_rows=1024, n_cols=1024)
        small, large = out[0], out[1]
        assert small["elements_per_second"] <= 1000 / 0.01 * 1.01
        assert large["elements_per_second"] > 3 * small["elements_per_second"]
