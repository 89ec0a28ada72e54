import csv

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsel import rng
from fedsel.calibration import (
    CalibrationSpec,
    calibrate,
    calibrated_round_update,
    evaluate_balance_map,
    perturb_moments,
    solve_calibration_weights,
    write_diagnostics_csv,
    write_weights_csv,
)
from fedsel.errors import DegenerateConstraintsError, InfeasibleCalibrationError, InvariantViolation
from fedsel.theory import enumerate_ipw_expectation
from fedsel.verification import brute_force_calibration


def _qp_reference(b, mu):
    n = b.shape[0]
    q = cp.Variable(n)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(q - 1.0 / n)), [cp.sum(q) == 1, b.T @ q == mu, q >= 0])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return q.value


def test_identity_map():
    spec = CalibrationSpec()
    assert np.array_equal(evaluate_balance_map(spec, [0.3, -1.2]), [0.3, -1.2])


def test_bin_indicators():
    spec = CalibrationSpec(balance_map="identity+bins", bins=3)
    out = evaluate_balance_map(spec, [0.0, 1.0])  # z_1 = 0 falls in the middle tercile
    assert np.array_equal(out, [0.0, 1.0, 0.0, 1.0, 0.0])
    assert spec.num_moments == 5


def test_balance_moments_monte_carlo():
    N = 100_000
    spec = CalibrationSpec(balance_map="identity+bins", bins=3)
    z = rng.normal(1, "z", *rng.grid(N, 2))
    b = evaluate_balance_map(spec, z)
    se = 1 / np.sqrt(N)
    assert np.all(np.abs(b[:, :2].mean(0)) < 3 * se)
    assert np.all(np.abs(b[:, 2:].mean(0) - 1 / 3) < 3 * np.sqrt(2 / 9) * se)


def test_two_clients_determined_by_constraints():
    w = solve_calibration_weights(np.array([[0.0], [1.0]]), [0.7]).weights
    assert np.allclose(w, [0.3, 0.7], atol=1e-15)


def test_sample_mean_target_gives_uniform(gen):
    b = gen.normal(size=(12, 3))
    w = solve_calibration_weights(b, b.mean(0)).weights
    assert np.allclose(w, 1 / 12, atol=1e-15)


def test_three_client_closed_form():
    w = solve_calibration_weights(np.array([[0.0], [1.0], [2.0]]), [0.5]).weights
    assert np.allclose(w, [7 / 12, 4 / 12, 1 / 12], atol=1e-15)
    ours = np.sum((w - 1 / 3) ** 2)
    assert ours <= brute_force_calibration(np.array([[0.0], [1.0], [2.0]]), [0.5], points=20001) + 1e-12


def test_active_constraints_match_qp_solver(gen):
    hits = 0
    for _ in range(30):
        n, d = int(gen.integers(5, 30)), int(gen.integers(1, 4))
        b = gen.normal(size=(n, d))
        # targets near the hull boundary force zero weights
        mu = gen.dirichlet(np.full(n, 0.2)) @ b
        res = solve_calibration_weights(b, mu)
        ref = _qp_reference(b, mu)
        assert np.allclose(res.weights, ref, atol=1e-6)
        hits += len(res.active_set) > 0
    assert hits > 10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(4, 50))
def test_constraints_hold_on_feasible_instances(seed, d, n):
    g = np.random.default_rng(seed)
    b = g.normal(size=(n, d))
    mu = g.dirichlet(np.ones(n)) @ b
    w = solve_calibration_weights(b, mu).weights
    assert abs(w.sum() - 1) <= 1e-10
    assert np.max(np.abs(w @ b - mu)) <= 1e-8
    assert w.min() >= 0


def test_infeasible_target_is_projected():
    b = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(InfeasibleCalibrationError):
        solve_calibration_weights(b, [3.0])
    with pytest.raises(InfeasibleCalibrationError):
        calibrate(b, [3.0], on_infeasible="raise")
    res = calibrate(b, [3.0])
    assert res.slack_norm == pytest.approx(1.0, abs=1e-5)
    assert res.weights.min() >= 0 and abs(res.weights.sum() - 1) < 1e-12


def test_too_few_clients_is_degenerate():
    with pytest.raises(DegenerateConstraintsError):
        solve_calibration_weights(np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5])


def test_update_degenerate_weights(gen):
    deltas = gen.normal(size=(4, 3))
    out = calibrated_round_update(np.full(4, 0.25), np.arange(4), deltas, np.ones(4))
    assert np.allclose(out, deltas.mean(0))


def test_update_single_participant():
    out = calibrated_round_update({3: 0.5}, [3], [[2.0, 0.0]], [0.5])
    assert np.allclose(out, [2.0, 0.0])


def test_update_rejects_non_enrolled():
    with pytest.raises(InvariantViolation):
        calibrated_round_update({0: 1.0}, [1], [[1.0]], [0.5])
    with pytest.raises(InvariantViolation):
        calibrated_round_update(np.array([1.0, 0.0]), [1], [[1.0]], [0.5], enrolled=[True, False])


def test_update_unbiased_by_enumeration():
    q = solve_calibration_weights(np.array([[0.0], [1.0], [2.0]]), [0.5]).weights
    part = np.array([0.3, 0.9, 0.5])
    deltas = np.array([[1.0, -1.0], [2.0, 0.5], [-3.0, 4.0]])
    est = enumerate_ipw_expectation(deltas, part, lambda a, D: calibrated_round_update(q, np.flatnonzero(a), D[a], part[a]))
    assert np.allclose(est, q @ deltas, atol=1e-14)


def test_perturb_moments():
    mu = np.array([0.1, -0.2])
    assert np.array_equal(perturb_moments(mu, 0.0, 5), mu)
    assert np.array_equal(perturb_moments(mu, 0.3, 5), perturb_moments(mu, 0.3, 5))
    draws = np.array([perturb_moments(mu, 0.3, s) for s in range(10_000)])
    sd = draws.std(axis=0)
    assert np.all(np.abs(sd / 0.3 - 1) < 0.03)
    with pytest.raises(ValueError):
        perturb_moments(mu, -1.0, 0)


def test_csv_outputs(tmp_path):
    res = solve_calibration_weights(np.array([[0.0], [1.0], [2.0]]), [1.9])
    write_weights_csv(res, [4, 8, 9], tmp_path / "w.csv")
    write_diagnostics_csv(res, tmp_path / "d.csv")
    rows = list(csv.DictReader((tmp_path / "w.csv").open()))
    assert [r["client_id"] for r in rows] == ["4", "8", "9"]
    assert [r["pinned_flag"] for r in rows] == ["1", "0", "0"]
    diag = list(csv.DictReader((tmp_path / "d.csv").open()))[0]
    assert diag["active_set_size"] == "1"
