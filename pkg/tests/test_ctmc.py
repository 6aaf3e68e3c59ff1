import numpy as np
import pytest

from corrdefault._num import geometric_grid
from corrdefault.ctmc import (
    MonotoneGenerator,
    forward_solve,
    independent_alpha_curve,
    independent_generator,
    independent_terminal_law,
    random_generator,
    sample_paths,
)

from oracles import uniformization_solve


class TestGeneratorValidation:
    def test_negative_rate_rejected(self):
        rates = np.zeros((4, 2))
        rates[0, 0] = -1.0
        with pytest.raises(ValueError, match="nonnegative"):
            MonotoneGenerator(2, rates)

    def test_rate_for_member_vertex_rejected(self):
        rates = np.zeros((4, 2))
        rates[1, 0] = 1.0  # vertex 0 already in subset {0}
        with pytest.raises(ValueError, match="already in"):
            MonotoneGenerator(2, rates)

    def test_full_set_is_absorbing(self, rng):
        gen = random_generator(3, seed=1)
        assert gen.exit_rates[7] == 0.0

    def test_cap(self):
        with pytest.raises(ValueError, match="cap"):
            MonotoneGenerator(15, np.zeros((1 << 15, 15)))

    def test_low_order_accessors(self):
        gen = random_generator(3, seed=2)
        assert gen.q_u(1) == gen.rates[0, 1]
        assert gen.q_uv(0, 2) == gen.rates[1, 2]
        assert gen.r_u(2) == pytest.approx(gen.rates[4, 0] + gen.rates[4, 1])
        assert gen.r_empty == pytest.approx(gen.rates[0].sum())


class TestForwardSolve:
    def test_two_state_chain(self):
        lam = 0.8
        gen = MonotoneGenerator(1, np.array([[lam], [0.0]]))
        grid = np.linspace(0.1, 2.0, 12)
        sol = forward_solve(gen, grid)
        np.testing.assert_allclose(sol.probs[:, 1], 1.0 - np.exp(-lam * grid), atol=1e-10)

    def test_empty_cell_decays_at_total_rate(self):
        for seed in range(6):
            gen = random_generator(4, seed=seed)
            grid = geometric_grid(1.0, 16)
            sol = forward_solve(gen, grid)
            np.testing.assert_allclose(
                sol.probs[:, 0], np.exp(-gen.r_empty * grid), atol=1e-9
            )

    def test_matches_uniformization_oracle(self):
        gen = random_generator(3, seed=9)
        sol = forward_solve(gen, np.array([0.7]))
        oracle = uniformization_solve(gen, 0.7)
        np.testing.assert_allclose(sol.probs[0], oracle, atol=1e-8)

    def test_probability_conservation(self):
        gen = random_generator(4, seed=3)
        sol = forward_solve(gen, geometric_grid(1.0, 16))
        assert not sol.renormalized.any()
        np.testing.assert_allclose(sol.probs.sum(axis=1), 1.0, atol=1e-10)

    def test_monotone_support_growth(self):
        gen = random_generator(3, seed=4)
        sol = forward_solve(gen, geometric_grid(1.0, 16))
        support = sol.probs > 1e-13
        assert np.all(support[:-1] <= support[1:])

    def test_grid_must_increase(self):
        gen = random_generator(2, seed=0)
        with pytest.raises(ValueError, match="increasing"):
            forward_solve(gen, np.array([0.5, 0.2]))


class TestIndependentConstruction:
    def test_rate_values(self):
        gen = independent_generator([0.0, 0.0], horizon=1.0)
        assert gen.q_u(0) == pytest.approx(np.log(2.0), abs=1e-14)
        gen2 = independent_generator([np.log(np.e - 1.0)], horizon=1.0)
        assert gen2.q_u(0) == pytest.approx(1.0, abs=1e-14)

    def test_rates_do_not_depend_on_state(self):
        gen = independent_generator([0.3, -0.7, 1.1])
        for v in range(3):
            rates = [gen.rates[a, v] for a in range(8) if not (a >> v) & 1]
            assert np.ptp(rates) == 0.0

    def test_terminal_law_is_product(self):
        alpha = np.array([0.3, -0.7])
        horizon = 2.0
        gen = independent_generator(alpha, horizon)
        sol = forward_solve(gen, np.array([horizon]))
        target = independent_terminal_law(alpha)
        np.testing.assert_allclose(sol.probs[0], target.probs, atol=1e-9)


class TestIndependentAlphaCurve:
    def test_horizon_boundary(self):
        alpha, exp_alpha = independent_alpha_curve(0.8, 1.0, np.array([1.0]))
        assert alpha[0] == pytest.approx(0.8, abs=1e-12)
        assert exp_alpha[0] == pytest.approx(np.exp(0.8), abs=1e-12)

    def test_log3_midpoint(self):
        alpha, _ = independent_alpha_curve(np.log(3.0), 1.0, np.array([0.5]))
        assert alpha[0] == pytest.approx(0.0, abs=1e-14)

    def test_exp_alpha_vanishes_monotonically_at_zero(self):
        t = np.geomspace(1e-9, 1.0, 40)
        _, exp_alpha = independent_alpha_curve(0.4, 1.0, t)
        assert np.all(np.diff(exp_alpha) > 0.0)
        assert exp_alpha[0] < 1e-8

    def test_rejects_nonpositive_time(self):
        with pytest.raises(ValueError):
            independent_alpha_curve(0.4, 1.0, np.array([0.0]))


class TestPathSampling:
    def test_paths_are_monotone_with_distinct_vertices(self):
        gen = random_generator(4, seed=5)
        paths, _ = sample_paths(gen, 1.0, 200, seed=3)
        for path in paths:
            assert len(set(path.vertices)) == len(path.vertices)
            assert all(t1 < t2 for t1, t2 in zip(path.times, path.times[1:]))
            mask = 0
            for v in path.vertices:
                assert not (mask >> v) & 1
                mask |= 1 << v
            assert mask == path.terminal

    def test_deterministic_given_seed(self):
        gen = random_generator(3, seed=6)
        paths_a, emp_a = sample_paths(gen, 1.0, 50, seed=10)
        paths_b, emp_b = sample_paths(gen, 1.0, 50, seed=10)
        assert paths_a == paths_b
        np.testing.assert_array_equal(emp_a.probs, emp_b.probs)

    def test_prefix_stability_under_path_count(self):
        # per-path seeding: the first paths do not depend on how many follow,
        # so any worker partition of the path range yields identical output
        gen = random_generator(3, seed=6)
        paths_5, _ = sample_paths(gen, 1.0, 5, seed=10)
        paths_20, _ = sample_paths(gen, 1.0, 20, seed=10)
        assert paths_5 == paths_20[:5]

    def test_absorbing_start_stays_empty(self):
        rates = np.zeros((4, 2))
        rates[1, 1] = 1.0
        rates[2, 0] = 1.0
        gen = MonotoneGenerator(2, rates)  # no exits from the empty set
        paths, emp = sample_paths(gen, 1.0, 30, seed=1)
        assert all(p.terminal == 0 for p in paths)
        assert emp.probs[0] == 1.0

    def test_independent_terminal_frequencies(self):
        gen = independent_generator([0.0, 0.0], horizon=1.0)
        _, emp = sample_paths(gen, 1.0, 100_000, seed=4)
        for cell in range(4):
            p = 0.25
            assert abs(emp.probs[cell] - p) < 3.0 * np.sqrt(p * (1 - p) / 100_000)

    def test_empirical_total_variation_against_forward_solve(self):
        gen = random_generator(4, seed=8)
        n_paths = 100_000
        _, emp = sample_paths(gen, 1.0, n_paths, seed=5)
        sol = forward_solve(gen, np.array([1.0]))
        tv = 0.5 * np.abs(emp.probs - sol.probs[0]).sum()
        assert tv < 4.0 * np.sqrt((1 << 4) / n_paths)
