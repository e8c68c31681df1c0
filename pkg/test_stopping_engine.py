#!/usr/bin/env python3
"""
Tests for the exact oracle, value-stack construction, policies, rollouts,
lattice references and pricing reports.
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from errors import InputError, ResourceError
from markov_models import black_scholes_model, finite_noise_model, lattice_surrogate
from payoff_library import Payoff
from stopping_engine import (
    STACK_GUARD,
    GaussianMeasure,
    NetworkPolicy,
    OraclePolicy,
    binomial_american,
    black_scholes_price,
    build_value_stack,
    continuation_network,
    exact_continuation,
    exact_dp_policy_value,
    exact_dp_value,
    exact_dp_values,
    l2_error,
    load_stack,
    price,
    projected_stack_size,
    rollout_price,
    save_stack,
)


def two_atom_instance(T=1):
    model = finite_noise_model(1, T, [[2.0], [0.5]], [0.5, 0.5], x0=[1.0])
    payoff = Payoff(kind="basket_put", d=1, T=T, K=1.0, r=0.0)
    return model, payoff


def random_instance(rng, d, T):
    up = 1.0 + rng.uniform(0.1, 0.5, size=d)
    down = 1.0 / (1.0 + rng.uniform(0.1, 0.5, size=d))
    p = float(rng.uniform(0.3, 0.7))
    model = finite_noise_model(d, T, [up, down], [p, 1.0 - p], x0=np.ones(d))
    payoff = Payoff(kind="basket_put", d=d, T=T, K=float(rng.uniform(0.9, 1.1)), r=float(rng.uniform(0.0, 0.05)))
    return model, payoff


def test_two_atom_instance_value_is_one_quarter():
    model, payoff = two_atom_instance()
    assert math.isclose(exact_dp_value(model, payoff, 0, [1.0]), 0.25, abs_tol=1e-15)
    assert math.isclose(exact_continuation(model, payoff, 0, [[1.0]])[0], 0.25, abs_tol=1e-15)
    assert math.isclose(exact_dp_policy_value(model, payoff), 0.25, abs_tol=1e-15)


def test_terminal_value_is_the_payoff():
    model, payoff = two_atom_instance(T=3)
    X = np.array([[0.2], [1.0], [3.0]])
    np.testing.assert_allclose(exact_dp_values(model, payoff, 3, X), payoff.value(3, X))


def test_single_atom_value_is_best_exercise_along_the_path():
    model = finite_noise_model(1, 4, [[0.8]], [1.0], x0=[1.0])
    payoff = Payoff(kind="basket_put", d=1, T=4, K=1.0, r=0.1)
    path = 0.8 ** np.arange(5)
    best = max(payoff.value(t, [[path[t]]])[0] for t in range(5))
    assert math.isclose(exact_dp_value(model, payoff, 0, [1.0]), best, rel_tol=1e-14)


def test_snell_policy_matches_value_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        model, payoff = random_instance(rng, int(rng.integers(1, 4)), int(rng.integers(2, 5)))
        assert abs(exact_dp_policy_value(model, payoff) - exact_dp_value(model, payoff, 0, model.x0)) <= 1e-10


def test_oracle_guards():
    model = finite_noise_model(1, 24, [[1.1], [0.9]], [0.5, 0.5])
    payoff = Payoff(kind="basket_put", d=1, T=24)
    with pytest.raises(ResourceError):
        exact_dp_value(model, payoff, 0, [1.0])
    with pytest.raises(InputError):
        exact_dp_value(black_scholes_model(1, 2), Payoff(kind="basket_put", d=1, T=2), 0, [1.0])
    with pytest.raises(InputError):
        exact_dp_value(model, Payoff(kind="basket_put", d=1, T=3), 0, [1.0])


@pytest.mark.parametrize("d,T", [(1, 2), (2, 3), (3, 4)])
def test_stack_with_exact_updates_matches_oracle(d, T):
    """N = 1e5 draws, no exercise margin: v_0(x_0) within Monte Carlo error of V(0, x_0)"""
    rng = np.random.default_rng(10 * d + T)
    model, payoff = random_instance(rng, d, T)
    stack = build_value_stack(model, payoff, 0.1, N=100_000, delta=0.0, n_val=100, inner=64, seed=d,
                              exact_update=True)
    exact = exact_dp_value(model, payoff, 0, model.x0)
    assert abs(stack.value(0, model.x0)[0] - exact) <= 1e-2
    assert all(draws.shape[0] <= 2 for draws in stack.draws)


def test_stack_structure_and_size_ledger():
    model, payoff = random_instance(np.random.default_rng(1), 2, 3)
    stack = build_value_stack(model, payoff, 0.2, N=500, delta=0.05, n_val=100, inner=32, seed=4, exact_update=True)
    assert stack.T == 3 and stack.d == 2
    X = np.random.default_rng(2).uniform(0.5, 1.5, size=(400, 2))
    np.testing.assert_allclose(stack.value(3, X), payoff.value(3, X), atol=1e-12)
    for t in range(3):
        phi = payoff.value(t, X)
        gamma = continuation_network(stack, t)(X)[:, 0]
        np.testing.assert_allclose(stack.value(t, X), np.maximum(phi - 0.05, gamma), atol=1e-10)
        assert stack.values[t].size <= 2 * (7 + stack.exercise[t].size + stack.continuations[t].size)
    assert stack.total_size == sum(stack.size_by_t)
    assert stack.manifest()["size_by_t"] == stack.size_by_t
    with pytest.raises(InputError):
        continuation_network(stack, 3)


@pytest.mark.parametrize("exact_update", [True, False])
def test_continuation_is_the_weighted_average_over_recorded_draws(exact_update):
    model, payoff = random_instance(np.random.default_rng(3), 2, 2)
    stack = build_value_stack(model, payoff, 0.2, N=300, n_val=100, inner=16, seed=5, exact_update=exact_update)
    X = np.random.default_rng(4).uniform(0.6, 1.4, size=(200, 2))
    for t in range(stack.T):
        draws, weights = stack.draws[t], stack.draw_weights[t]
        assert math.isclose(weights.sum(), 1.0, rel_tol=1e-12)
        expected = np.zeros(X.shape[0])
        for y, w in zip(draws, weights):
            Y = np.tile(y, (X.shape[0], 1))
            if exact_update:
                moved = model.update(t, X, Y)
            else:
                moved = model.eta(stack.eps_bar, t).network(np.hstack([X, Y]))
            expected += w * stack.values[t + 1](moved)[:, 0]
        np.testing.assert_allclose(continuation_network(stack, t)(X)[:, 0], expected, atol=1e-9)


def test_stack_with_eta_networks_is_close_to_oracle():
    model, payoff = two_atom_instance()
    stack = build_value_stack(model, payoff, 0.1, N=10_000, delta=0.0, n_val=100, inner=64, seed=3)
    assert not stack.exact_update
    assert abs(stack.value(0, [1.0])[0] - 0.25) <= 0.12


def test_stack_build_is_reproducible():
    model, payoff = two_atom_instance(T=2)
    a = build_value_stack(model, payoff, 0.2, N=300, n_val=100, inner=16, seed=9, exact_update=True)
    b = build_value_stack(model, payoff, 0.2, N=300, n_val=100, inner=16, seed=9, exact_update=True)
    X = np.linspace(0.1, 3.0, 50)[:, None]
    assert np.array_equal(a.value(0, X), b.value(0, X))
    assert a.manifest() == b.manifest()


def test_build_rejects_parameters():
    model, payoff = two_atom_instance()
    with pytest.raises(InputError):
        build_value_stack(model, payoff, 0.0)
    with pytest.raises(InputError):
        build_value_stack(model, payoff, 0.1, n_val=50)
    with pytest.raises(InputError):
        build_value_stack(model, payoff, 0.1, delta=-1.0)
    with pytest.raises(InputError):
        build_value_stack(model, Payoff(kind="basket_put", d=1, T=2), 0.1)


def test_stack_round_trip(tmp_path):
    model, payoff = two_atom_instance(T=2)
    stack = build_value_stack(model, payoff, 0.2, N=200, n_val=100, inner=16, seed=1, exact_update=True,
                              measure=GaussianMeasure(center=np.ones(1), scale=0.5))
    save_stack(stack, tmp_path / "stack")
    loaded = load_stack(tmp_path / "stack")
    X = np.linspace(0.0, 4.0, 33)[:, None]
    for t in range(3):
        assert np.array_equal(loaded.value(t, X), stack.value(t, X))
    assert loaded.manifest() == stack.manifest()
    for a, b in zip(loaded.draws, stack.draws):
        assert np.array_equal(a, b)
    with pytest.raises(InputError):
        load_stack(tmp_path / "empty")


def test_rollouts_respect_the_oracle():
    rng = np.random.default_rng(5)
    for _ in range(5):
        model, payoff = random_instance(rng, int(rng.integers(1, 3)), 3)
        exact = exact_dp_value(model, payoff, 0, model.x0)
        oracle_estimate, oracle_se = rollout_price(OraclePolicy(model, payoff), model, payoff, n_paths=20_000, seed=1)
        assert abs(oracle_estimate - exact) <= 4 * oracle_se + 1e-12
        stack = build_value_stack(model, payoff, 0.2, N=1000, n_val=100, inner=16, seed=2, exact_update=True)
        estimate, se = rollout_price(NetworkPolicy(stack), model, payoff, n_paths=20_000, seed=1)
        assert estimate <= exact + 3 * se + 1e-12


def test_rollout_needs_enough_paths():
    model, payoff = two_atom_instance()
    with pytest.raises(InputError):
        rollout_price(OraclePolicy(model, payoff), model, payoff, n_paths=50)


def test_l2_error_against_oracle():
    model, payoff = two_atom_instance(T=2)
    stack = build_value_stack(model, payoff, 0.2, N=50_000, delta=0.0, n_val=100, inner=16, seed=6,
                              exact_update=True)
    estimate = l2_error(stack, 0, model=model, payoff=payoff, n=500)
    assert estimate.n == 500
    assert 0.0 <= estimate.ci_low <= estimate.value <= estimate.ci_high
    assert estimate.value < 0.02
    points = np.array([[1.0], [2.0]])
    exact = l2_error(stack, 2, oracle_values=payoff.value(2, points), points=points)
    assert exact.value <= 1e-12
    with pytest.raises(InputError):
        l2_error(stack, 0, model=black_scholes_model(1, 2), payoff=payoff)


def test_l2_error_decreases_with_more_draws():
    model = finite_noise_model(1, 2, [[1.4], [0.7]], [0.3, 0.7], x0=[1.0])
    payoff = Payoff(kind="basket_put", d=1, T=2, K=1.0, r=0.0)

    def mean_error(N):
        errors = []
        for seed in range(4):
            stack = build_value_stack(model, payoff, 0.2, N=N, delta=0.0, n_val=100, inner=16, seed=seed,
                                      exact_update=True)
            errors.append(l2_error(stack, 0, model=model, payoff=payoff, n=500, seed=seed).value)
        return float(np.mean(errors))

    coarse, fine = mean_error(16), mean_error(256)
    assert fine < coarse


def test_black_scholes_formula_parity_and_lattice():
    S0, K, r, sigma, maturity = 100.0, 100.0, 0.05, 0.2, 1.0
    call = black_scholes_price(S0, K, r, sigma, maturity, "call")
    put = black_scholes_price(S0, K, r, sigma, maturity, "put")
    assert math.isclose(call - put, S0 - K * math.exp(-r * maturity), rel_tol=1e-12)
    european = binomial_american(S0, K, r, sigma, maturity, 2000, [maturity], kind="put")
    assert abs(european - put) / put < 1e-3


def test_bermudan_lies_between_european_and_american():
    S0, K, r, sigma = 100.0, 100.0, 0.05, 0.2
    dates = [0.1 * i for i in range(1, 11)]
    bermudan = binomial_american(S0, K, r, sigma, 1.0, 1000, dates)
    american = binomial_american(S0, K, r, sigma, 1.0, 1000, np.arange(1001) / 1000)
    european = binomial_american(S0, K, r, sigma, 1.0, 1000, [1.0])
    assert european < bermudan < american


def test_binomial_deterministic_and_errors():
    assert binomial_american(90.0, 100.0, 0.0, 0.0, 1.0, 10, [0.0, 0.5, 1.0]) == 10.0
    with pytest.raises(InputError):
        binomial_american(100.0, 100.0, 0.05, 0.2, 1.0, 10, [0.33])
    with pytest.raises(InputError):
        binomial_american(100.0, 100.0, 0.05, 0.2, 1.0, 10, [1.0], kind="digital")


def test_bermudan_put_network_policy_against_lattice():
    """Policy from a lattice-surrogate stack, rolled out under Black-Scholes, against the 5000-step lattice"""
    S0, K, r, sigma = 100.0, 100.0, 0.05, 0.2
    model = black_scholes_model(1, 10, mu=r, sigma=sigma, dt=0.1, x0=[S0])
    payoff = Payoff(kind="basket_put", d=1, T=10, K=K, r=r, step=0.1)
    oracle = binomial_american(S0, K, r, sigma, 1.0, 5000, [0.1 * i for i in range(11)])
    report, stack = price(model, payoff, 0.1, N=100_000, delta=0.0, n_paths=50_000, seed=0, n_val=100, inner=64,
                          exact_update=True, build_model=lattice_surrogate(model), oracle_value=oracle)
    assert report.value_oracle == oracle
    assert abs(report.value_rollout - oracle) / oracle <= 0.015
    assert report.value_rollout <= oracle + 3 * report.se_rollout
    assert report.size_by_t == stack.size_by_t


def test_price_report_is_deterministic():
    model, payoff = two_atom_instance(T=2)
    first, _ = price(model, payoff, 0.2, N=500, n_paths=1000, seed=3, n_val=100, inner=16, exact_update=True,
                     l2_points=100)
    second, _ = price(model, payoff, 0.2, N=500, n_paths=1000, seed=3, n_val=100, inner=16, exact_update=True,
                      l2_points=100)
    assert first.to_dict() == second.to_dict()
    report = first.to_dict()
    assert report["wall_ms"] is None
    assert set(report["l2_by_t"]) == {0, 1, 2}
    assert math.isclose(report["value_oracle"], exact_dp_value(model, payoff, 0, [1.0]))
    for key in ("value_oracle", "value_network", "value_rollout", "se_rollout", "l2_by_t", "size_by_t", "seed"):
        assert key in report


def test_price_with_zero_volatility_is_intrinsic_value():
    model = black_scholes_model(1, 2, mu=0.0, sigma=0.0, dt=0.5, x0=[0.8])
    payoff = Payoff(kind="basket_put", d=1, T=2, K=1.0, r=0.0, step=0.5)
    report, _ = price(model, payoff, 0.1, N=8, n_paths=200, n_val=100, inner=8, exact_update=True)
    assert math.isclose(report.value_rollout, 0.2, rel_tol=1e-12)
    assert report.se_rollout == 0.0


def test_stack_size_guard_rejects_oversized_builds():
    model = black_scholes_model(1, 4, mu=0.0, sigma=0.0, dt=0.25, x0=[0.8])
    payoff = Payoff(kind="basket_put", d=1, T=4, K=1.0, r=0.0, step=0.25)
    assert projected_stack_size(model, payoff, 100)[0] > STACK_GUARD
    with pytest.raises(ResourceError):
        build_value_stack(model, payoff, 0.1, N=100, n_val=100, inner=8, exact_update=True)
    with pytest.raises(ResourceError):
        price(model, payoff, 0.1, N=100, n_paths=200, n_val=100, inner=8, exact_update=True)
    finite, finite_payoff = two_atom_instance(T=4)
    sizes = projected_stack_size(finite, finite_payoff, 100)
    assert sizes[4] == finite_payoff.network(4).size
    assert sizes[3] == 2 * sizes[4] + finite_payoff.network(3).size
