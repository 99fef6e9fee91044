import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from meibp.engine import init_state
from meibp.model import Hyperparams
from meibp.numerics import log_factorial
from meibp.rowopt import (
    BRUTE_FORCE_CAP,
    CapacityError,
    FeatureCache,
    LsConfig,
    RowObjective,
    SolutionSet,
    brute_force_maximize,
    build_row_objective,
    double_greedy_maximize,
    enumerate_values,
    eval_full,
    ls_maximize,
    maximize,
    nu_difference,
    random_solution,
)
from meibp.synth import SynthSpec, gen_sparse_factor_data
from meibp.variational import compute_elbo
from oracles import all_subsets, random_state


def random_objective(rng, k, scale=1.0):
    phi = np.abs(rng.normal(0, 1, (k, 6)))
    empty = rng.random(k) < 0.3
    return RowObjective(w=scale * phi @ phi.T, omega=rng.normal(0, 3 * scale, k),
                        eta=rng.normal(0, 1, k), empty_without_n=empty,
                        k_plus_without_n=int(rng.integers(0, 5)), constant=rng.normal())


def objective_from_state(rng, masked=False, k=5):
    state = random_state(rng, n=6, d=4, k=k, masked=masked, empty_cols=1)
    return state, build_row_objective(state, int(rng.integers(state.n_rows)))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12))
@settings(max_examples=60, deadline=None)
def test_diminishing_returns(seed, k):
    rng = np.random.default_rng(seed)
    obj = random_objective(rng, k)
    assert np.all(obj.w >= 0)
    a = rng.random(k) < 0.3
    b = a | (rng.random(k) < 0.5)
    for e in np.flatnonzero(~b):
        ga = eval_full(obj, a | np.eye(k, dtype=bool)[e]) - eval_full(obj, a)
        gb = eval_full(obj, b | np.eye(k, dtype=bool)[e]) - eval_full(obj, b)
        assert ga >= gb - 1e-9 * max(1.0, abs(ga))


def test_state_objective_weights_nonnegative():
    rng = np.random.default_rng(0)
    for masked in (False, True):
        for _ in range(10):
            _, obj = objective_from_state(rng, masked)
            assert np.all(obj.w >= 0)


def test_nu_difference_values():
    diff, nu0 = nu_difference([0, 3, 5], 6)
    lf = math.lgamma
    assert nu0[0] == 0
    # m=3 without n, N=6: ln[(6-3-1)! 3!] - ln[(6-3)! 2!]
    assert diff[1] == pytest.approx(math.log(3) - math.log(3), abs=1e-12)
    assert diff[2] == pytest.approx(math.log(5) - math.log(1), rel=1e-12)
    assert nu0[1] == pytest.approx(lf(4) + lf(3) - lf(7), rel=1e-12)


def test_objective_matches_elbo_differences():
    """F(S) - F(S') equals the change in the full bound when row n moves S' -> S."""
    rng = np.random.default_rng(1)
    for masked in (False, True):
        for _ in range(5):
            state, _ = objective_from_state(rng, masked, k=4)
            state.reset_inactive()
            state.refresh_caches()
            n = int(rng.integers(state.n_rows))
            obj = build_row_objective(state, n)
            ref = None
            for s in all_subsets(state.k_max):
                trial = state.copy()
                trial.z.set_row(n, s.astype(np.uint8))
                trial.refresh_caches()
                elbo = compute_elbo(trial, "all")
                f = eval_full(obj, s)
                if ref is None:
                    ref = elbo - f
                assert elbo - f == pytest.approx(ref, abs=1e-9 * abs(elbo))


class TestSolutionSet:
    def test_incremental_matches_full(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            k = int(rng.integers(1, 13))
            obj = random_objective(rng, k)
            sol = SolutionSet(obj, rng.random(k) < 0.5)
            for _ in range(20):
                e = int(rng.integers(k))
                if e in sol:
                    sol.remove(e)
                else:
                    sol.add(e)
                assert sol.value == pytest.approx(eval_full(obj, sol.members), rel=1e-8, abs=1e-8)

    def test_gain_vectors_match_singles(self):
        rng = np.random.default_rng(4)
        obj = random_objective(rng, 8)
        sol = SolutionSet(obj, rng.random(8) < 0.5)
        adds, rems = sol.add_gains(), sol.remove_gains()
        for e in range(8):
            if e in sol:
                assert rems[e] == pytest.approx(sol.gain_remove(e), rel=1e-12)
            else:
                assert adds[e] == pytest.approx(sol.gain_add(e), rel=1e-12)

    def test_membership_errors(self):
        obj = random_objective(np.random.default_rng(5), 3)
        sol = SolutionSet(obj)
        with pytest.raises(KeyError):
            sol.gain_remove(0)
        sol.add(0)
        with pytest.raises(KeyError):
            sol.gain_add(0)

    def test_recompute(self):
        obj = random_objective(np.random.default_rng(6), 5)
        sol = SolutionSet(obj, [1, 0, 1, 0, 1])
        assert sol.recompute() == sol.value


class TestBruteForce:
    def test_enumeration_matches_eval_full(self):
        rng = np.random.default_rng(7)
        obj = random_objective(rng, 6)
        values = enumerate_values(obj, chunk=7)
        for code, s in enumerate(all_subsets(6)):
            bits = s[::-1]  # itertools.product puts the high bit first
            assert values[code] == pytest.approx(eval_full(obj, bits), rel=1e-12, abs=1e-12)

    def test_optimum_and_floor(self):
        rng = np.random.default_rng(8)
        obj = random_objective(rng, 7)
        sol, floor = brute_force_maximize(obj)
        everything = [eval_full(obj, s) for s in all_subsets(7)]
        assert sol.value == pytest.approx(max(everything), rel=1e-12)
        assert floor == pytest.approx(min(everything), rel=1e-12)

    def test_capacity(self):
        obj = random_objective(np.random.default_rng(9), BRUTE_FORCE_CAP + 1)
        with pytest.raises(CapacityError):
            enumerate_values(obj)


class TestLs:
    def test_modular_objective_is_solved_exactly(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            k = int(rng.integers(1, 10))
            omega = rng.normal(0, 2, k)
            obj = RowObjective(np.zeros((k, k)), omega, np.zeros(k), np.zeros(k, bool), 3)
            sol = ls_maximize(obj, LsConfig(epsilon=1e-12))
            assert np.array_equal(sol.members, omega > 0)

    def test_small_gains_fall_under_threshold(self):
        # after taking 4.0 the threshold is 0.1/9 * (4 + 2) > 0.05
        omega = np.array([0.05, -2.0, 4.0])
        obj = RowObjective(np.zeros((3, 3)), omega, np.zeros(3), np.zeros(3, bool), 0)
        assert ls_maximize(obj).members.tolist() == [False, False, True]
        assert ls_maximize(obj, LsConfig(epsilon=1e-6)).members.tolist() == [True, False, True]

    def test_never_below_bound(self):
        rng = np.random.default_rng(11)
        cfg = LsConfig()
        for _ in range(300):
            k = int(rng.integers(1, 11))
            obj = random_objective(rng, k)
            best, floor = brute_force_maximize(obj)
            sol = ls_maximize(obj, cfg)
            bound = floor + (1 - cfg.epsilon / k) * (best.value - floor) / 3
            assert sol.value >= bound - 1e-9 * max(1.0, abs(best.value))
            assert sol.value == pytest.approx(eval_full(obj, sol.members), rel=1e-9, abs=1e-9)

    @pytest.mark.parametrize("order", ["ascending", "best-first"])
    def test_scan_orders_reach_local_optimum(self, order):
        rng = np.random.default_rng(12)
        cfg = LsConfig(scan_order=order)
        for _ in range(50):
            obj = random_objective(rng, 8)
            sol = ls_maximize(obj, cfg)
            assert sol.gain_evals >= 8 and not sol.pass_capped

    def test_pass_cap(self):
        obj = random_objective(np.random.default_rng(13), 6)
        assert ls_maximize(obj, LsConfig(max_passes=1)).value <= ls_maximize(obj).value + 1e-12

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LsConfig(epsilon=0)
        with pytest.raises(ValueError):
            LsConfig(scan_order="random")
        with pytest.raises(ValueError):
            LsConfig(max_passes=0)

    def test_empty_ground_set(self):
        obj = RowObjective(np.zeros((0, 0)), np.zeros(0), np.zeros(0), np.zeros(0, bool), 0)
        with pytest.raises(ValueError):
            ls_maximize(obj)


class TestDoubleGreedy:
    def test_all_positive_modular_takes_everything(self):
        obj = RowObjective(np.zeros((4, 4)), np.ones(4), np.zeros(4), np.zeros(4, bool), 0)
        sol = double_greedy_maximize(obj, np.random.default_rng(0))
        assert sol.members.all() and sol.gain_evals == 8

    def test_tie_rule_drops_element(self):
        # a = b = 0 for every element, so each one is dropped without a draw
        obj = RowObjective(np.zeros((3, 3)), np.zeros(3), np.zeros(3), np.zeros(3, bool), 0)

        class NoDraw:
            def random(self):
                raise AssertionError("no random draw on a tie")

        assert not double_greedy_maximize(obj, NoDraw()).members.any()

    def test_unopposed_gain_keeps_element(self):
        # w = 0, omega = 1: adding gains 1, removing from the full set gains -1
        obj = RowObjective(np.array([[0.0]]), np.array([1.0]), np.zeros(1), np.zeros(1, bool), 0)
        rng = np.random.default_rng(1)
        assert all(double_greedy_maximize(obj, rng).members[0] for _ in range(200))

    def test_keep_probability(self):
        # first element: a = omega_0 = 2, b = w_01 - omega_0 = 1, so kept w.p. 2/3
        w = np.array([[0.0, 3.0], [3.0, 0.0]])
        obj = RowObjective(w, np.array([2.0, 2.0]), np.zeros(2), np.zeros(2, bool), 0)
        rng = np.random.default_rng(2)
        kept = sum(double_greedy_maximize(obj, rng).members[0] for _ in range(4000))
        assert stats.binomtest(int(kept), 4000, 2 / 3).pvalue > 1e-3


class TestRandomAndDispatch:
    def test_random_is_fair(self):
        obj = random_objective(np.random.default_rng(0), 10)
        rng = np.random.default_rng(3)
        counts = np.zeros(10)
        trials = 2000
        for _ in range(trials):
            counts += random_solution(obj, rng).members
        chi2 = float(np.sum((counts - trials / 2) ** 2 / (trials / 2))
                     + np.sum((trials - counts - trials / 2) ** 2 / (trials / 2)))
        assert stats.chi2.sf(chi2, 10) > 1e-3

    def test_dispatch(self):
        obj = random_objective(np.random.default_rng(4), 5)
        rng = np.random.default_rng(0)
        best, _ = brute_force_maximize(obj)
        assert maximize(obj, "brute").value == best.value
        for name in ("ls", "double-greedy", "random"):
            assert maximize(obj, name, rng=rng).value <= best.value + 1e-9
        with pytest.raises(ValueError):
            maximize(obj, "anneal")


def test_feature_cache_refresh_matches_rebuild():
    rng = np.random.default_rng(5)
    state = random_state(rng, n=8, d=4, k=4, masked=True)
    cache = FeatureCache(state)
    state.q.reset_rows([1, 3], 1.69)
    cache.refresh_columns([1, 3])
    fresh = FeatureCache(state)
    for g1, g2 in zip(cache.gram, fresh.gram):
        np.testing.assert_allclose(g1, g2, rtol=1e-14)
    np.testing.assert_allclose(cache.eta, fresh.eta, rtol=1e-14)


def test_real_objective_ls_close_to_optimum():
    spec = SynthSpec(n=60, d=30, k=8, sigma_noise=0.5, seed=3)
    dataset, z, _ = gen_sparse_factor_data(spec)
    state = init_state(dataset, 8, Hyperparams(alpha=3, sigma_x=0.5, sigma_a=1.0), z_init=z)
    cache = FeatureCache(state)
    for n in range(10):
        obj = build_row_objective(state, n, cache)
        best, floor = brute_force_maximize(obj)
        assert ls_maximize(obj).value >= floor + 0.95 * (best.value - floor) - 1e-9


def test_log_factorial_penalty_in_objective():
    k = 3
    obj = RowObjective(np.zeros((k, k)), np.zeros(k), np.zeros(k), np.ones(k, bool), 2)
    s = np.array([True, True, False])
    assert eval_full(obj, s) == pytest.approx(-log_factorial(4))
