"""Synthetic client populations with ridge-regularized logistic local losses.

Client ``i`` draws covariates ``z_i ~ N(0, I)``, features ``x ~ N(0, I_m)``
and labels ``y ~ Bernoulli(sigmoid(<theta_base + Gamma z_i, x>))``.  The
population objective is the unweighted mean of the client losses, and
:func:`solve_target_optimum` computes its exact minimizer by damped Newton.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from . import rng
from .errors import ConfigurationError, ConvergenceError, DimensionError


@dataclass(frozen=True)
class PopulationSpec:
    num_clients: int = 400
    covariate_dim: int = 2
    feature_dim: int = 5
    samples_per_client: int = 200
    base_param: tuple[float, ...] = (0.5, -0.5, 0.25, 0.0, 0.0)
    heterogeneity: tuple[tuple[float, ...], ...] = (
        (1.0, 0.0),
        (0.0, 1.0),
        (0.5, 0.0),
        (0.0, 0.5),
        (0.0, 0.0),
    )
    ridge: float = 1e-2
    master_seed: int = 20240611

    def validate(self) -> None:
        for name in ("num_clients", "covariate_dim", "feature_dim", "samples_per_client"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1", key=name)
        if not self.ridge > 0:
            raise ConfigurationError("ridge must be > 0", key="ridge")
        if len(self.base_param) != self.feature_dim:
            raise ConfigurationError(
                f"base_param has length {len(self.base_param)}, expected {self.feature_dim}",
                key="base_param",
            )
        gamma = np.asarray(self.heterogeneity, dtype=float)
        if gamma.shape != (self.feature_dim, self.covariate_dim):
            raise ConfigurationError(
                f"heterogeneity has shape {gamma.shape}, "
                f"expected ({self.feature_dim}, {self.covariate_dim})",
                key="heterogeneity",
            )
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigurationError("master_seed must fit in 64 unsigned bits", key="master_seed")


@dataclass(frozen=True)
class ClientRecord:
    id: int
    z: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    data_param: np.ndarray


@dataclass(frozen=True)
class Population(Sequence[ClientRecord]):
    """Stacked client data; indexing yields :class:`ClientRecord` views."""

    z: np.ndarray  # (N, d_z)
    features: np.ndarray  # (N, n, m)
    labels: np.ndarray  # (N, n)
    data_param: np.ndarray  # (N, m)
    spec: PopulationSpec | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return self.z.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        i = int(i)
        if i < 0:
            i += len(self)
        return ClientRecord(i, self.z[i], self.features[i], self.labels[i], self.data_param[i])

    def __iter__(self) -> Iterator[ClientRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    @classmethod
    def from_clients(cls, clients: Sequence[ClientRecord]) -> "Population":
        if isinstance(clients, Population):
            return clients
        if len(clients) == 0:
            raise ConfigurationError("population is empty")
        ordered = sorted(clients, key=lambda c: c.id)
        sizes = {np.shape(c.features) for c in ordered}
        if len(sizes) != 1:
            raise DimensionError("clients must share dataset dimensions to be stacked")
        return cls(
            z=np.stack([np.asarray(c.z, float) for c in ordered]),
            features=np.stack([np.asarray(c.features, float) for c in ordered]),
            labels=np.stack([np.asarray(c.labels, float) for c in ordered]),
            data_param=np.stack([np.asarray(c.data_param, float) for c in ordered]),
        )


@dataclass(frozen=True)
class OracleSolution:
    theta_star: np.ndarray
    f_star: float
    grad_norm: float
    iterations: int = 0


def generate_population(spec: PopulationSpec) -> Population:
    spec.validate()
    N, d_z, m, n = spec.num_clients, spec.covariate_dim, spec.feature_dim, spec.samples_per_client
    seed = spec.master_seed
    z = rng.normal(seed, "covariates", *rng.grid(N, d_z))
    gamma = np.asarray(spec.heterogeneity, dtype=float)
    data_param = np.asarray(spec.base_param, dtype=float)[None, :] + z @ gamma.T
    features = rng.normal(seed, "features", *rng.grid(N, n, m))
    margins = np.sum(features * data_param[:, None, :], axis=-1)
    labels = rng.bernoulli(expit(margins), seed, "labels", *rng.grid(N, n)).astype(np.float64)
    return Population(z=z, features=features, labels=labels, data_param=data_param, spec=spec)


def _softplus(s: np.ndarray) -> np.ndarray:
    # log(1 + exp(s)) without overflow for large |s|
    return np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))


def _check_theta(theta, m: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (m,):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({m},)")
    return theta


def client_loss(client: ClientRecord, theta, lam: float) -> float:
    X = np.asarray(client.features, dtype=float)
    theta = _check_theta(theta, X.shape[1])
    s = X @ theta
    y = np.asarray(client.labels, dtype=float)
    return float(np.mean(_softplus(s) - y * s) + 0.5 * lam * theta @ theta)


def client_gradient(client: ClientRecord, theta, lam: float) -> np.ndarray:
    X = np.asarray(client.features, dtype=float)
    theta = _check_theta(theta, X.shape[1])
    r = expit(X @ theta) - np.asarray(client.labels, dtype=float)
    return X.T @ r / X.shape[0] + lam * theta


def client_losses(pop: Population, theta, lam: float) -> np.ndarray:
    """Per-client losses, shape (N,)."""
    theta = _check_theta(theta, pop.feature_dim)
    s = pop.features @ theta
    return np.mean(_softplus(s) - pop.labels * s, axis=1) + 0.5 * lam * theta @ theta


def client_gradients(pop: Population, theta, lam: float) -> np.ndarray:
    """Per-client gradients, shape (N, m)."""
    theta = _check_theta(theta, pop.feature_dim)
    r = expit(pop.features @ theta) - pop.labels
    n = pop.features.shape[1]
    return (r[:, None, :] @ pop.features)[:, 0, :] / n + lam * theta


def population_objective(pop: Sequence[ClientRecord], theta, lam: float) -> float:
    if len(pop) == 0:
        raise ConfigurationError("population is empty")
    return float(np.mean(client_losses(Population.from_clients(pop), theta, lam)))


def population_gradient(pop: Sequence[ClientRecord], theta, lam: float) -> np.ndarray:
    return np.mean(client_gradients(Population.from_clients(pop), theta, lam), axis=0)


def population_hessian(pop: Sequence[ClientRecord], theta, lam: float) -> np.ndarray:
    pop = Population.from_clients(pop)
    theta = _check_theta(theta, pop.feature_dim)
    X = pop.features.reshape(-1, pop.feature_dim)
    p = expit(X @ theta)
    w = p * (1.0 - p)
    return (X * w[:, None]).T @ X / X.shape[0] + lam * np.eye(pop.feature_dim)


def solve_target_optimum(
    pop: Sequence[ClientRecord],
    lam: float,
    tol: float = 1e-10,
    max_iter: int = 100,
    theta0=None,
) -> OracleSolution:
    """Minimize the population objective by Newton's method with Armijo backtracking."""
    if not lam > 0:
        raise ConfigurationError("ridge must be > 0 for a unique optimum", key="ridge")
    pop = Population.from_clients(pop)
    m = pop.feature_dim
    theta = np.zeros(m) if theta0 is None else np.array(theta0, dtype=float)
    f = population_objective(pop, theta, lam)
    for it in range(max_iter + 1):
        g = population_gradient(pop, theta, lam)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return OracleSolution(theta, f, gnorm, it)
        if it == max_iter:
            break
        step = -np.linalg.solve(population_hessian(pop, theta, lam), g)
        slope = float(g @ step)
        t = 1.0
        # below this slope the Armijo test is lost in rounding; take the full step
        flat = -slope < 1e-13 * max(1.0, abs(f))
        while True:
            cand = theta + t * step
            f_cand = population_objective(pop, cand, lam)
            if flat or f_cand <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        theta, f = cand, f_cand
    raise ConvergenceError(
        f"Newton did not reach |grad| < {tol} in {max_iter} iterations",
        last_iterate=theta,
        grad_norm=gnorm,
    )


def heterogeneity_constant(pop: Population, theta_star, lam: float) -> float:
    """sqrt of the mean squared client-gradient norm at the target optimum."""
    g = client_gradients(pop, theta_star, lam)
    return float(np.sqrt(np.mean(np.sum(g * g, axis=1))))
