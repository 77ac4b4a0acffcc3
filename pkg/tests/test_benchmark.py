import inspect
import threading
import time

import numpy as np
import pytest

from mbot_core.benchmark import TIMING_COLUMNS, median_timings, run_benchmark
from mbot_core.minibatch import MinibatchConfig
from mbot_core.parallel import ordered_map, resolve_jobs


class TestOrderedMap:

    def test_results_come_back_in_input_order(self):
        def slow_square(x):
            time.sleep(0.001 * (10 - x))
            return x * x

        assert list(ordered_map(slow_square, range(10), jobs=4)) == [x * x for x in range(10)]

    def test_serial_path_stays_on_the_calling_thread(self):
        threads = set(ordered_map(lambda _: threading.get_ident(), range(3), jobs=1))
        assert threads == {threading.get_ident()}

    def test_zero_means_hardware_parallelism(self):
        assert resolve_jobs(0) >= 1
        assert resolve_jobs(3) == 3


class TestBenchmark:

    def test_table_layout_and_skips(self):
        frame = run_benchmark(["minibatch_exact", "sinkhorn"], [20, 40], reps=2,
                              cfg=MinibatchConfig(m=5, k=3), full_cap=30)
        assert list(frame.columns) == TIMING_COLUMNS
        skipped = frame[frame["skipped"]]
        assert skipped[["solver", "n"]].values.tolist() == [["sinkhorn", 40]]
        assert len(frame) == 2 * 2 + 2 + 1
        medians = median_timings(frame)
        assert len(medians) == 3

    def test_unknown_solver(self):
        with pytest.raises(ValueError, match="Unknown solver"):
            run_benchmark(["magic"], [10])

    def test_batch_larger_than_cloud(self):
        with pytest.raises(ValueError, match="exceeds"):
            run_benchmark(["minibatch_exact"], [5], cfg=MinibatchConfig(m=10, k=1))

    def test_default_cap_admits_ten_thousand_points(self):
        frame = run_benchmark(["sinkhorn"], [10], reps=1)
        assert not frame["skipped"].any()
        assert inspect.signature(run_benchmark).parameters["full_cap"].default == 10_000

    @pytest.mark.slow
    def test_minibatch_cost_does_not_depend_on_cloud_size(self):
        sizes = [1_000, 10_000, 100_000]
        frame = run_benchmark(["minibatch_exact", "minibatch_sinkhorn"], sizes, reps=5,
                              cfg=MinibatchConfig(m=100, k=50, block_size=50))
        medians = median_timings(frame).set_index(["solver", "n"])["seconds"]
        for solver in ("minibatch_exact", "minibatch_sinkhorn"):
            per_size = [medians[(solver, n)] for n in sizes]
            assert max(per_size) < 2 * min(per_size)
        assert np.all(np.isfinite(frame["value"]))

    @pytest.mark.slow
    def test_full_sinkhorn_grows_with_cloud_size(self):
        frame = run_benchmark(["sinkhorn"], [1_000, 10_000], reps=1)
        assert not frame["skipped"].any()
        medians = median_timings(frame).set_index(["solver", "n"])["seconds"]
        assert medians[("sinkhorn", 10_000)] >= 10 * medians[("sinkhorn", 1_000)]
