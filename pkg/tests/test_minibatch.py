"""Minibatch estimators, batch sampling and averaged plans."""

import itertools
from collections import Counter

import numpy as np
import pytest

from mbot_core.core_ot import SinkhornParams, solve_exact_1d, solve_exact_assignment
from mbot_core.distributions import CostSpec, DiscreteDistribution
from mbot_core.minibatch import (
    BatchSampler,
    EnumerationCapError,
    MinibatchConfig,
    SparsePlan,
    _closed_form_exact,
    _closed_form_log,
    batch_loss,
    closed_form_1d,
    draw_subsets,
    plan_averaged_exact,
    plan_entropic,
    plan_subsampled,
    sample_pair,
    u_stat_exact,
    u_stat_semidiscrete,
    u_stat_subsampled,
    validate_plan,
)


def _sorted_uniform(rng, n):
    return DiscreteDistribution(np.sort(rng.random(n)))


def _hand_enumeration(a, b, m, cost):
    """Average of the exact batch loss over every pair of m-subsets"""
    total = 0.0
    count = 0
    for A in itertools.combinations(range(a.n), m):
        for B in itertools.combinations(range(b.n), m):
            value, _ = solve_exact_assignment(a.subset(A), b.subset(B), cost)
            total += value
            count += 1
    return total / count, count


class TestMinibatchConfig:

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError, match="Batch size"):
            MinibatchConfig(m=0)
        with pytest.raises(ValueError, match="Unknown loss"):
            MinibatchConfig(loss="W2")
        with pytest.raises(ValueError, match="pair sampling"):
            MinibatchConfig(pair_sampling="sobol")

    def test_batch_larger_than_cloud(self):
        with pytest.raises(ValueError, match="exceeds"):
            MinibatchConfig(m=5).validate(4)


class TestSampling:

    def test_full_batch_is_every_index(self, rng):
        subsets = draw_subsets(rng, 5, 5, 3)
        np.testing.assert_array_equal(subsets, np.tile(np.arange(5), (3, 1)))

    def test_subsets_are_sorted_and_distinct(self, rng):
        subsets = draw_subsets(rng, 50, 7, 100)
        assert np.all(np.diff(subsets, axis=1) > 0)

    def test_large_clouds_use_choice(self, rng):
        subsets = draw_subsets(rng, 5000, 4, 10)
        assert subsets.shape == (10, 4)
        assert np.all(np.diff(subsets, axis=1) > 0)

    def test_subset_frequencies_are_uniform(self):
        sampler = BatchSampler(seed=7, n_source=4, n_target=4, m=2)
        A, _ = sampler.pairs(0, 10000)
        counts = Counter(tuple(row) for row in A)
        assert len(counts) == 6
        for freq in counts.values():
            assert abs(freq / 10000 - 1 / 6) <= 0.02

    def test_same_seed_same_sequence(self):
        first = BatchSampler(seed=3, n_source=20, n_target=30, m=4).pairs(0, 600)
        second = BatchSampler(seed=3, n_source=20, n_target=30, m=4).pairs(0, 600)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])

    def test_draw_is_a_function_of_its_counter(self):
        A, B = BatchSampler(seed=11, n_source=12, n_target=12, m=3).pairs(0, 700)
        for t in (0, 255, 256, 511, 699):
            pair = sample_pair(11, t, 12, 3)
            np.testing.assert_array_equal(pair.A, A[t])
            np.testing.assert_array_equal(pair.B, B[t])

    def test_streams_are_independent(self):
        base = BatchSampler(seed=5, n_source=30, n_target=30, m=5, stream=0).pairs(0, 50)[0]
        other = BatchSampler(seed=5, n_source=30, n_target=30, m=5, stream=1).pairs(0, 50)[0]
        assert not np.array_equal(base, other)


class TestBatchLoss:

    def test_exact_1d_shortcut(self, pair_1d, abs_cost):
        a, b = pair_1d
        value, plan = batch_loss(a.points, b.points, abs_cost, MinibatchConfig(m=2))
        assert value == pytest.approx(2.0)
        np.testing.assert_array_equal(plan.assignment, [0, 1])

    def test_divergence_of_identical_batches_is_zero(self, rng, sq_cost):
        x = rng.random((4, 2))
        value, _ = batch_loss(x, x.copy(), sq_cost, MinibatchConfig(m=4, loss="S_eps"))
        assert abs(value) <= 1e-12

    def test_entropic_plan_is_returned(self, rng, sq_cost):
        x = rng.random((4, 2))
        y = rng.random((4, 2))
        value, plan = batch_loss(x, y, sq_cost, MinibatchConfig(m=4, loss="W_eps"))
        assert np.isfinite(value)
        np.testing.assert_allclose(plan.matrix.sum(), 1.0, atol=1e-9)


class TestExactUStatistic:

    def test_full_batch_equals_exact_loss(self, integer_clouds_1d, abs_cost):
        a, b = integer_clouds_1d
        value = u_stat_exact(a, b, abs_cost, MinibatchConfig(m=4))
        assert value == pytest.approx(solve_exact_1d(a, b, abs_cost)[0], abs=1e-12)

    def test_single_point_batches_average_pairwise_cost(self, pair_1d, abs_cost):
        assert u_stat_exact(*pair_1d, abs_cost, MinibatchConfig(m=1)) == pytest.approx(2.5, abs=1e-12)

    def test_matches_hand_enumeration(self, integer_clouds_1d, abs_cost):
        a, b = integer_clouds_1d
        expected, count = _hand_enumeration(a, b, 2, abs_cost)
        assert count == 36
        assert u_stat_exact(a, b, abs_cost, MinibatchConfig(m=2)) == pytest.approx(expected, abs=1e-12)

    def test_multivariate_enumeration(self, rng, sq_cost):
        a = DiscreteDistribution(rng.random((5, 2)))
        b = DiscreteDistribution(rng.random((5, 2)))
        expected, _ = _hand_enumeration(a, b, 3, sq_cost)
        assert u_stat_exact(a, b, sq_cost, MinibatchConfig(m=3)) == pytest.approx(expected, abs=1e-12)

    def test_never_below_the_exact_loss(self, rng, abs_cost, sq_cost):
        for _ in range(10):
            a = DiscreteDistribution(rng.random(6))
            b = DiscreteDistribution(rng.random(6))
            exact = solve_exact_1d(a, b, abs_cost)[0]
            for m in (1, 2, 3, 6):
                assert u_stat_exact(a, b, abs_cost, MinibatchConfig(m=m)) >= exact - 1e-12
        a = DiscreteDistribution(rng.random((5, 2)))
        b = DiscreteDistribution(rng.random((5, 2)))
        exact = solve_exact_assignment(a, b, sq_cost)[0]
        assert u_stat_exact(a, b, sq_cost, MinibatchConfig(m=2)) >= exact - 1e-12

    def test_symmetric_in_its_arguments(self, rng, sq_cost):
        a = DiscreteDistribution(rng.random((6, 2)))
        b = DiscreteDistribution(rng.random((6, 2)))
        for cfg, tol in ((MinibatchConfig(m=3), 1e-12), (MinibatchConfig(m=2, loss="S_eps"), 1e-8)):
            forward = u_stat_exact(a, b, sq_cost, cfg)
            backward = u_stat_exact(b, a, sq_cost, cfg)
            assert forward == pytest.approx(backward, abs=tol)

    def test_cloud_against_itself_is_positive_below_full_batch(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(6))
        for m in range(1, 6):
            assert u_stat_exact(a, a, abs_cost, MinibatchConfig(m=m)) > 0
        assert u_stat_exact(a, a, abs_cost, MinibatchConfig(m=6)) == 0.0

    def test_enumeration_cap(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(30))
        with pytest.raises(EnumerationCapError, match="cap"):
            u_stat_exact(a, a, abs_cost, MinibatchConfig(m=10))

    def test_unequal_sizes_rejected(self, abs_cost):
        a = DiscreteDistribution(np.arange(4.0))
        b = DiscreteDistribution(np.arange(5.0))
        with pytest.raises(ValueError, match="Size mismatch"):
            u_stat_exact(a, b, abs_cost, MinibatchConfig(m=2))


class TestSubsampledUStatistic:

    def test_all_distinct_pairs_recover_exact_value(self, integer_clouds_1d, abs_cost):
        a, b = integer_clouds_1d
        cfg = MinibatchConfig(m=2, k=36, pair_sampling="distinct_pairs")
        value, per_draw = u_stat_subsampled(a, b, abs_cost, cfg)
        assert len(per_draw) == 36
        assert value == pytest.approx(u_stat_exact(a, b, abs_cost, cfg), abs=1e-12)

    def test_too_many_distinct_pairs(self, integer_clouds_1d, abs_cost):
        cfg = MinibatchConfig(m=2, k=37, pair_sampling="distinct_pairs")
        with pytest.raises(ValueError, match="distinct pairs"):
            u_stat_subsampled(*integer_clouds_1d, abs_cost, cfg)

    def test_self_comparison_is_positive(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(20))
        value = u_stat_subsampled(a, a, abs_cost, MinibatchConfig(m=5, k=200)).value
        assert value > 0

    def test_single_draws_are_unbiased(self, abs_cost):
        data = np.random.default_rng(42)
        a = DiscreteDistribution(data.random(8))
        b = DiscreteDistribution(data.random(8))
        exact = u_stat_exact(a, b, abs_cost, MinibatchConfig(m=2))
        draws = 10_000
        estimate = u_stat_subsampled(a, b, abs_cost, MinibatchConfig(m=2, k=draws, seed=77))
        stderr = estimate.per_draw.std(ddof=1) / np.sqrt(draws)
        assert abs(estimate.value - exact) <= 3 * stderr

    def test_unequal_sizes_allowed(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(15))
        b = DiscreteDistribution(rng.random(25))
        estimate = u_stat_subsampled(a, b, abs_cost, MinibatchConfig(m=5, k=40))
        assert estimate.per_draw.shape == (40,)
        assert estimate.solver_stats()["pairs"] == 40

    def test_deterministic_for_any_worker_count(self, rng, sq_cost):
        a = DiscreteDistribution(rng.random((40, 2)))
        b = DiscreteDistribution(rng.random((40, 2)))
        cfg = MinibatchConfig(m=6, k=700, loss="W_eps", block_size=64)
        one = u_stat_subsampled(a, b, sq_cost, cfg)
        four = u_stat_subsampled(a, b, sq_cost, cfg.with_(jobs=4))
        np.testing.assert_array_equal(one.per_draw, four.per_draw)
        assert one.value == four.value

    @pytest.mark.slow
    def test_sampling_deviation_within_hoeffding_bound(self, abs_cost):
        delta = 0.1
        n, m, k = 8, 2, 500
        bound = np.sqrt(2 * np.log(2 / delta) / k)
        hits = 0
        for rep in range(200):
            data = np.random.default_rng([99, rep])
            a = DiscreteDistribution(data.random(n))
            b = DiscreteDistribution(data.random(n))
            exact = u_stat_exact(a, b, abs_cost, MinibatchConfig(m=m))
            estimate = u_stat_subsampled(a, b, abs_cost, MinibatchConfig(m=m, k=k, seed=1000 + rep)).value
            hits += abs(estimate - exact) <= bound
        assert hits / 200 >= 1 - delta


class TestSemidiscrete:

    def test_point_mass_target(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(6))
        y0 = 0.3

        def point_mass(gen, size):
            return np.full((size, 1), y0)

        value = u_stat_semidiscrete(a, point_mass, abs_cost, MinibatchConfig(m=6), draws=50)
        assert value == pytest.approx(np.mean(np.abs(a.points[:, 0] - y0)), rel=1e-12)

    def test_resampling_with_single_points_gives_pairwise_cost(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(10))
        b = DiscreteDistribution(rng.random(10))

        def resample(gen, size):
            return b.points[gen.integers(0, b.n, size)]

        value = u_stat_semidiscrete(a, resample, abs_cost, MinibatchConfig(m=1), draws=20000)
        pairwise = u_stat_exact(a, b, abs_cost, MinibatchConfig(m=1))
        assert value == pytest.approx(pairwise, abs=0.01)

    def test_deterministic(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(10))

        def normal(gen, size):
            return gen.standard_normal((size, 1))

        cfg = MinibatchConfig(m=3, seed=42)
        first = u_stat_semidiscrete(a, normal, abs_cost, cfg, draws=300)
        second = u_stat_semidiscrete(a, normal, abs_cost, cfg, draws=300)
        assert first == second


class TestAveragedPlans:

    def test_enumerated_plan_has_exact_marginals(self, integer_clouds_1d, abs_cost):
        a, b = integer_clouds_1d
        plan = plan_averaged_exact(a, b, abs_cost, MinibatchConfig(m=2))
        np.testing.assert_allclose(plan.row_sums(), 0.25, atol=1e-10)
        np.testing.assert_allclose(plan.col_sums(), 0.25, atol=1e-10)
        assert plan.draw_count == 36
        assert validate_plan(plan)["valid"]

    def test_plan_cost_equals_u_statistic(self, rng, sq_cost):
        a = DiscreteDistribution(rng.random((5, 2)))
        b = DiscreteDistribution(rng.random((5, 2)))
        cfg = MinibatchConfig(m=2)
        plan = plan_averaged_exact(a, b, sq_cost, cfg)
        assert plan.inner_cost(a.points, b.points, sq_cost) == pytest.approx(
            u_stat_exact(a, b, sq_cost, cfg), abs=1e-10)

    def test_full_batch_gives_exact_plan(self, rng, sq_cost):
        a = DiscreteDistribution(rng.random((5, 2)))
        b = DiscreteDistribution(rng.random((5, 2)))
        plan = plan_averaged_exact(a, b, sq_cost, MinibatchConfig(m=5))
        _, exact = solve_exact_assignment(a, b, sq_cost)
        np.testing.assert_allclose(plan.to_dense(), exact.matrix, atol=1e-15)

    def test_entropic_batches_keep_marginals(self, rng, sq_cost):
        a = DiscreteDistribution(rng.random((5, 2)))
        b = DiscreteDistribution(rng.random((5, 2)))
        plan = plan_averaged_exact(a, b, sq_cost, MinibatchConfig(m=3, loss="W_eps"))
        np.testing.assert_allclose(plan.row_sums(), 0.2, atol=1e-8)
        np.testing.assert_allclose(plan.col_sums(), 0.2, atol=1e-8)

    def test_subsampled_plan_has_unit_mass(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(30))
        b = DiscreteDistribution(rng.random(30))
        plan = plan_subsampled(a, b, abs_cost, MinibatchConfig(m=5, k=77))
        assert plan.total_mass() == pytest.approx(1.0, abs=1e-9)
        report = validate_plan(plan, require_marginals=False)
        assert report["valid"]
        assert plan.subsampled

    def test_single_full_batch_has_no_marginal_error(self, rng, abs_cost):
        a = DiscreteDistribution(rng.random(12))
        plan = plan_subsampled(a, a, abs_cost, MinibatchConfig(m=12, k=1))
        assert plan.marginal_l1_error() == pytest.approx((0.0, 0.0), abs=1e-15)

    @pytest.mark.slow
    def test_row_deviation_within_marginal_bound(self, abs_cost):
        delta = 0.1
        bound = np.sqrt(2 * np.log(2 / delta) / 100)
        data = np.random.default_rng(5)
        a = DiscreteDistribution(data.random(100))
        b = DiscreteDistribution(data.random(100))
        within = []
        for seed in range(200):
            plan = plan_subsampled(a, b, abs_cost, MinibatchConfig(m=10, k=100, seed=seed))
            within.append(np.mean(np.abs(plan.row_sums() - 0.01) <= bound))
        assert np.mean(within) >= 1 - delta

    def test_entropic_full_plan(self, rng, sq_cost):
        a = DiscreteDistribution(rng.random((6, 2)))
        plan = plan_entropic(a, a, sq_cost, SinkhornParams(epsilon=0.5))
        np.testing.assert_allclose(plan.row_sums(), 1 / 6, atol=1e-9)


class TestSparsePlan:

    def test_dense_cap(self):
        plan = SparsePlan(3000)
        with pytest.raises(ValueError, match="dense cap"):
            plan.to_dense(dense_cap=1000)

    def test_triplets_sorted(self):
        matrix = np.array([[0.0, 0.25], [0.25, 0.0], [0.25, 0.25]])
        rows, cols, masses = SparsePlan.from_dense(matrix).triplets()
        np.testing.assert_array_equal(rows, [0, 1, 2, 2])
        np.testing.assert_array_equal(cols, [1, 0, 0, 1])
        np.testing.assert_allclose(masses, 0.25)

    def test_flush_threshold_does_not_change_result(self, rng, abs_cost, monkeypatch):
        a = DiscreteDistribution(rng.random(20))
        b = DiscreteDistribution(rng.random(20))
        cfg = MinibatchConfig(m=4, k=300)
        reference = plan_subsampled(a, b, abs_cost, cfg).to_dense()
        monkeypatch.setattr(SparsePlan, "FLUSH_THRESHOLD", 10)
        np.testing.assert_allclose(plan_subsampled(a, b, abs_cost, cfg).to_dense(), reference, atol=1e-15)

    def test_validate_flags_negative_mass(self):
        report = validate_plan(np.array([[0.75, -0.25], [0.0, 0.5]]))
        assert not report["valid"]
        assert any("Negative" in e for e in report["errors"])


class TestClosedForm1D:

    def test_full_batch_is_scaled_identity(self):
        np.testing.assert_allclose(closed_form_1d(20, 20), np.eye(20) / 20, atol=1e-15)

    def test_single_point_batches_are_uniform(self):
        np.testing.assert_allclose(closed_form_1d(7, 1), np.full((7, 7), 1 / 49), atol=1e-15)

    @pytest.mark.parametrize("m", [2, 3])
    def test_matches_enumeration_on_sorted_clouds(self, rng, abs_cost, m):
        a = _sorted_uniform(rng, 6)
        b = _sorted_uniform(rng, 6)
        plan = plan_averaged_exact(a, b, abs_cost, MinibatchConfig(m=m)).to_dense()
        np.testing.assert_allclose(plan, closed_form_1d(6, m), atol=1e-10)

    def test_matches_enumeration_up_to_ten_points(self, rng, abs_cost):
        for n in range(1, 11):
            a = _sorted_uniform(rng, n)
            b = _sorted_uniform(rng, n)
            for m in range(1, n + 1):
                plan = plan_averaged_exact(a, b, abs_cost, MinibatchConfig(m=m)).to_dense()
                np.testing.assert_allclose(plan, closed_form_1d(n, m), atol=1e-9)

    def test_log_path_agrees_with_exact_arithmetic(self):
        np.testing.assert_allclose(_closed_form_log(30, 4), _closed_form_exact(30, 4), rtol=1e-10, atol=1e-18)

    def test_large_n_has_uniform_marginals(self):
        plan = closed_form_1d(120, 9)
        np.testing.assert_allclose(plan.sum(axis=1), 1 / 120, rtol=1e-9)
        np.testing.assert_allclose(plan.sum(axis=0), 1 / 120, rtol=1e-9)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError, match="1 <= m <= n"):
            closed_form_1d(4, 5)
