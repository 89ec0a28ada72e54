from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

from fedsel.errors import ConfigurationError, ConvergenceError, DimensionError
from fedsel.synthgen import (
    ClientRecord,
    Population,
    PopulationSpec,
    client_gradient,
    client_gradients,
    client_loss,
    client_losses,
    generate_population,
    heterogeneity_constant,
    population_gradient,
    population_objective,
    solve_target_optimum,
)


def _client(X, y, i=0):
    X = np.asarray(X, float)
    return ClientRecord(i, np.zeros(2), X, np.asarray(y, float), np.zeros(X.shape[1]))


def test_zero_clients_rejected():
    with pytest.raises(ConfigurationError):
        generate_population(PopulationSpec(num_clients=0))


def test_zero_heterogeneity_gives_common_parameter():
    spec = PopulationSpec(num_clients=20, samples_per_client=10, heterogeneity=((0.0, 0.0),) * 5)
    pop = generate_population(spec)
    assert np.array_equal(pop.data_param, np.tile(spec.base_param, (20, 1)))


def test_same_spec_gives_identical_population(small_spec, small_pop):
    again = generate_population(small_spec)
    for name in ("z", "features", "labels", "data_param"):
        assert np.array_equal(getattr(again, name), getattr(small_pop, name))


def test_population_shapes_and_labels(small_pop, small_spec):
    N, n, m = small_spec.num_clients, small_spec.samples_per_client, small_spec.feature_dim
    assert small_pop.features.shape == (N, n, m)
    assert set(np.unique(small_pop.labels)) <= {0.0, 1.0}
    gamma = np.asarray(small_spec.heterogeneity)
    assert np.allclose(small_pop.data_param, np.asarray(small_spec.base_param) + small_pop.z @ gamma.T)
    assert small_pop[3].id == 3 and len(small_pop) == N


def test_bad_heterogeneity_shape_names_key():
    with pytest.raises(ConfigurationError) as exc:
        PopulationSpec(heterogeneity=((1.0,),)).validate()
    assert exc.value.key == "heterogeneity"


def test_loss_at_zero_is_log2():
    c = _client(np.random.default_rng(0).normal(size=(8, 3)), [0, 1] * 4)
    assert client_loss(c, np.zeros(3), 0.0) == pytest.approx(np.log(2), abs=1e-15)


def test_ridge_term_with_zero_margins():
    c = _client(np.zeros((5, 2)), [1, 0, 1, 0, 1])
    assert client_loss(c, np.array([0.6, 0.8]), 2.0) == pytest.approx(np.log(2) + 1, abs=1e-15)


def test_gradient_single_sample():
    x = np.array([0.3, -1.0, 2.0])
    c = _client(x[None, :], [1.0])
    assert np.allclose(client_gradient(c, np.zeros(3), 0.0), -0.5 * x, atol=1e-15)


def test_gradient_matches_finite_differences(small_pop, gen):
    h = 1e-5
    for _ in range(20):
        theta = gen.normal(size=5)
        c = small_pop[int(gen.integers(len(small_pop)))]
        g = client_gradient(c, theta, 0.01)
        fd = np.array([(client_loss(c, theta + h * e, 0.01) - client_loss(c, theta - h * e, 0.01)) / (2 * h) for e in np.eye(5)])
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


def test_per_client_newton_optimum_is_stationary(small_pop):
    c = small_pop[0]
    one = Population.from_clients([c])
    sol = solve_target_optimum(one, 0.01)
    assert np.linalg.norm(client_gradient(c, sol.theta_star, 0.01)) < 1e-8


def test_batched_forms_match_single_client_forms(small_pop, gen):
    theta = gen.normal(size=5)
    losses = client_losses(small_pop, theta, 0.01)
    grads = client_gradients(small_pop, theta, 0.01)
    for i in (0, 7, 39):
        assert losses[i] == pytest.approx(client_loss(small_pop[i], theta, 0.01), rel=1e-13)
        assert np.allclose(grads[i], client_gradient(small_pop[i], theta, 0.01), rtol=1e-12, atol=1e-15)


def test_population_objective_is_mean(small_pop, gen):
    theta = gen.normal(size=5)
    assert population_objective([small_pop[2]], theta, 0.01) == pytest.approx(client_loss(small_pop[2], theta, 0.01))
    both = population_objective([small_pop[0], small_pop[1]], theta, 0.01)
    assert both == pytest.approx((client_loss(small_pop[0], theta, 0.01) + client_loss(small_pop[1], theta, 0.01)) / 2)
    with pytest.raises(ConfigurationError):
        population_objective([], theta, 0.01)


def test_wrong_theta_dimension(small_pop):
    with pytest.raises(DimensionError):
        client_losses(small_pop, np.zeros(4), 0.01)


def test_optimum_beats_random_points_and_perturbations(small_pop, small_oracle, gen):
    f = small_oracle.f_star
    assert small_oracle.grad_norm < 1e-10
    for _ in range(100):
        assert f <= population_objective(small_pop, gen.normal(size=5), 0.01)
    for _ in range(20):
        delta = 1e-3 * gen.normal(size=5)
        assert f <= population_objective(small_pop, small_oracle.theta_star + delta, 0.01)


def test_optimum_matches_scipy(small_pop, small_oracle):
    res = minimize(
        lambda t: population_objective(small_pop, t, 0.01),
        np.zeros(5),
        jac=lambda t: population_gradient(small_pop, t, 0.01),
        method="BFGS",
        options={"gtol": 1e-12},
    )
    assert np.allclose(res.x, small_oracle.theta_star, atol=1e-6)


def test_label_symmetric_data_has_zero_optimum(gen):
    X = gen.normal(size=(30, 3))
    c = _client(np.vstack([X, X]), np.r_[np.ones(30), np.zeros(30)])
    sol = solve_target_optimum([c], 0.01)
    assert np.allclose(sol.theta_star, 0.0, atol=1e-12)


def test_one_dimensional_optimum_matches_grid_search(gen):
    X = gen.normal(size=(200, 1))
    y = (gen.uniform(size=200) < 1 / (1 + np.exp(-1.3 * X[:, 0]))).astype(float)
    c = _client(X, y)
    sol = solve_target_optimum([c], 0.01)
    grid = np.arange(-5, 5 + 1e-9, 1e-4)
    s = X[:, 0][None, :] * grid[:, None]
    vals = np.mean(np.logaddexp(0, s) - y * s, axis=1) + 0.005 * grid**2
    assert abs(sol.theta_star[0] - grid[np.argmin(vals)]) < 2e-4


def test_newton_failure_reports_last_iterate(small_pop):
    with pytest.raises(ConvergenceError) as exc:
        solve_target_optimum(small_pop, 0.01, max_iter=1, tol=1e-30)
    assert exc.value.last_iterate is not None and exc.value.grad_norm > 0


def test_heterogeneity_constant(small_pop, small_oracle):
    G = heterogeneity_constant(small_pop, small_oracle.theta_star, 0.01)
    g = client_gradients(small_pop, small_oracle.theta_star, 0.01)
    assert G == pytest.approx(np.sqrt(np.mean(np.sum(g**2, axis=1))))
    assert G > 0
