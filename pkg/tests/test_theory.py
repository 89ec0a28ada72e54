import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from fedsel import rng
from fedsel.errors import ConfigurationError, EnumerationTooLarge, StepSizeError
from fedsel.theory import (
    TheoryConstants,
    TwoClientInstance,
    bias_floor_rhs,
    bias_floor_terms,
    enumerate_ipw_expectation,
    expected_two_client_training,
    participation_patterns,
    residual_weight_error,
    two_client_gap,
    two_client_minimizer,
)

GRID = list(itertools.product((0.5, 1.0, 2.0), (0.5, 1.0, 2.0), (0.1, 0.25, 0.5)))


def test_minimizer_values():
    assert two_client_minimizer(TwoClientInstance(1.0, 1.0, 0.0)) == 0.0
    assert two_client_minimizer(TwoClientInstance(1.0, 1.0, 0.5)) == 0.5


def test_gap_values():
    assert two_client_gap(TwoClientInstance(1.0, 1.0, 0.5)) == 0.125
    assert two_client_gap(TwoClientInstance(3.0, 2.0, 0.0)) == 0.0


@pytest.mark.parametrize("mu,a,eps", GRID)
def test_closed_forms_against_numeric_minimization(mu, a, eps):
    inst = TwoClientInstance(mu, a, eps)
    t = minimize_scalar(inst.weighted_objective, bracket=(-3, 3), tol=1e-14).x
    assert abs(two_client_minimizer(inst) - t) < 1e-7  # Brent: sqrt(machine eps) in x
    direct = inst.objective(eps * a) - inst.objective(0.0)
    assert abs(two_client_gap(inst) - direct) < 1e-12
    assert two_client_gap(inst) >= eps**2 * inst.G2 / (8 * mu)


def test_instance_validation():
    with pytest.raises(ConfigurationError):
        TwoClientInstance(1.0, 1.0, 0.7)
    with pytest.raises(ConfigurationError):
        TwoClientInstance(0.0, 1.0, 0.1)


def _example(**kw):
    base = dict(L=1.0, mu=1.0, G=1.0, eta_tilde=0.05, h0=1.0, variance=2.0, eps_w=0.1, C=1.0, N=10, B=1.0, p_min=1.0)
    base.update(kw)
    return TheoryConstants(**base)


def test_bias_floor_example_against_arbitrary_precision():
    mpmath.mp.dps = 40
    ref = mpmath.mpf("0.05") * 2 + mpmath.mpf("0.1") ** 2 + (1 - mpmath.mpf("0.05") / 8) ** 200
    assert bias_floor_rhs(_example(), 200) == pytest.approx(float(ref), abs=1e-14)
    assert bias_floor_rhs(_example(), 200) == pytest.approx(0.39538315368349475, abs=1e-15)


def test_bias_floor_limits():
    assert bias_floor_terms(_example(eps_w=0.0), 50)["floor"] == 0.0
    c = _example()
    limit = c.C * c.eta_tilde * c.V / c.mu + c.C * c.eps_w**2 * c.G**2 / c.mu
    assert bias_floor_terms(c, 100_000)["transient"] < 1e-12
    assert bias_floor_rhs(c, 100_000) == pytest.approx(limit, abs=1e-12)


def test_step_size_precondition():
    c = _example(N=1, p_min=0.1)  # c0 = 8 (1 + 10) = 88
    assert c.max_step == pytest.approx(1 / 88)
    with pytest.raises(StepSizeError):
        bias_floor_rhs(c, 10)


def test_variance_formula():
    c = TheoryConstants(L=2.0, mu=1.0, G=3.0, eta_tilde=1e-3, h0=1.0, sigma2=0.5, p_min=0.2, K=5, gamma=2.0, N=10)
    assert c.V == pytest.approx(0.5 / (5 * 2) + 2 * 0.5 / (5 * 4) + 9 / 2)


def test_residual_weight_error():
    rho, eps = residual_weight_error([0.3, 0.2], [0.3, 0.2])
    assert eps == 0.0 and np.all(rho == 1)
    part = np.array([0.5, 0.25])
    rho, eps = residual_weight_error(np.array([0.9, 0.6]) * part, part)
    assert np.allclose(rho, [0.9, 0.6]) and eps == pytest.approx(0.4)


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6))
def test_eps_nonnegative(p, q):
    n = min(len(p), len(q))
    rho, eps = residual_weight_error(p[:n], q[:n])
    assert eps >= 0 and (eps == 0) == bool(np.all(rho == 1))


def test_patterns():
    P = participation_patterns(3)
    assert P.shape == (8, 3) and len({tuple(r) for r in P}) == 8


def test_enumeration_examples():
    assert enumerate_ipw_expectation([1.0, 2.0, 3.0], [0.5, 1.0, 0.25]) == 2.0
    naive = enumerate_ipw_expectation([1.0, 2.0, 3.0], [0.9, 0.5, 0.1], "naive", condition_nonempty=True)
    assert abs(naive - 2.0) > 0.05
    # same value by explicit summation over the 7 nonempty patterns
    total = mass = 0.0
    for a in itertools.product((0, 1), repeat=3):
        if not any(a):
            continue
        w = np.prod([p if ai else 1 - p for ai, p in zip(a, (0.9, 0.5, 0.1))])
        total += w * np.mean([d for ai, d in zip(a, (1, 2, 3)) if ai])
        mass += w
    assert naive == pytest.approx(total / mass, abs=1e-15)


def test_naive_with_equal_probabilities_is_unbiased():
    est = enumerate_ipw_expectation([1.0, 2.0, 3.0, 6.0], [0.3] * 4, "naive", condition_nonempty=True)
    assert est == pytest.approx(3.0, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_oracle_unbiased_property(n, seed):
    g = np.random.default_rng(seed)
    deltas = g.normal(size=(n, 2))
    p = g.uniform(0.05, 1.0, size=n)
    assert np.allclose(enumerate_ipw_expectation(deltas, p), deltas.mean(0), atol=1e-12, rtol=0)


def test_enumeration_matches_monte_carlo():
    deltas = np.array([1.0, -2.0, 0.5, 4.0])
    p = np.array([0.2, 0.7, 0.5, 0.9])
    exact = enumerate_ipw_expectation(deltas, p, "naive", condition_nonempty=True)
    reps = 200_000
    A = rng.uniform(2, "mc", *rng.grid(reps, 4)) < p
    A = A[A.any(1)]
    mc = (A @ deltas / A.sum(1)).mean()
    assert abs(mc - exact) < 4 * (A @ deltas / A.sum(1)).std() / np.sqrt(len(A))


def test_enumeration_size_guard():
    with pytest.raises(EnumerationTooLarge):
        enumerate_ipw_expectation(np.zeros(21), np.full(21, 0.5))


def test_two_client_training_limits():
    inst = TwoClientInstance(1.0, 1.0, 0.5)
    assert abs(expected_two_client_training(inst, "round_only_ipw")[-1] - 0.5) < 1e-3
    assert abs(expected_two_client_training(inst, "fedipw")[-1]) < 1e-3
    assert abs(expected_two_client_training(inst, "oracle_ipw")[-1]) < 1e-3
    with pytest.raises(ConfigurationError):
        expected_two_client_training(inst, "naive")
