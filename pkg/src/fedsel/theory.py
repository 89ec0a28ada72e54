"""Closed-form checks: the two-client lower-bound instance, the bias-floor
bound, residual weight ratios and exact expectations over participation
patterns."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, EnumerationTooLarge, StepSizeError


@dataclass(frozen=True)
class TwoClientInstance:
    """f_1 = mu/2 (t - a)^2 and f_2 = mu/2 (t + a)^2, misweighted by (1 + eps, 1 - eps)."""

    mu: float
    a: float
    eps_w: float

    def __post_init__(self):
        if not self.mu > 0 or not self.a > 0:
            raise ConfigurationError("mu and a must be positive")
        if not 0 <= self.eps_w <= 0.5:
            raise ConfigurationError("eps_w must lie in [0, 1/2]")

    @property
    def centers(self) -> np.ndarray:
        return np.array([self.a, -self.a])

    @property
    def rho(self) -> np.ndarray:
        return np.array([1.0 + self.eps_w, 1.0 - self.eps_w])

    @property
    def G2(self) -> float:
        return self.mu**2 * self.a**2

    @property
    def L(self) -> float:
        return self.mu

    B = 1.0

    def client_losses(self, theta: float) -> np.ndarray:
        return 0.5 * self.mu * (theta - self.centers) ** 2

    def objective(self, theta: float) -> float:
        return float(np.mean(self.client_losses(theta)))

    def weighted_objective(self, theta: float) -> float:
        rho = self.rho
        return float(rho @ self.client_losses(theta) / rho.sum())


def two_client_minimizer(instance: TwoClientInstance) -> float:
    return instance.eps_w * instance.a


def two_client_gap(instance: TwoClientInstance) -> float:
    """F(theta_rho) - F* = eps^2 G^2 / (2 mu)."""
    return 0.5 * instance.eps_w**2 * instance.G2 / instance.mu


@dataclass(frozen=True)
class TheoryConstants:
    L: float
    mu: float
    G: float
    eta_tilde: float
    h0: float
    B: float = 1.0
    sigma2: float = 0.0
    p_min: float = 1.0
    K: int = 1
    gamma: float = 1.0
    N: int = 1
    eps_w: float = 0.0
    C: float = 1.0
    variance: float | None = None  # overrides the formula for V when given

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    @property
    def V(self) -> float:
        if self.variance is not None:
            return self.variance
        Np = self.N * self.p_min
        return (
            self.sigma2 / (self.K * Np)
            + self.L * self.sigma2 / (self.K * self.gamma**2)
            + self.G**2 / Np
        )

    @property
    def c0(self) -> float:
        return 8.0 * (1.0 + self.kappa * self.B**2 / (self.N * self.p_min))

    @property
    def max_step(self) -> float:
        return 1.0 / (self.c0 * self.L)

    @property
    def small_error_ratio(self) -> float:
        """eps_w * sqrt(L B^2 / mu); the floor formula presumes this is small."""
        return self.eps_w * math.sqrt(self.L * self.B**2 / self.mu)


def bias_floor_terms(constants: TheoryConstants, R: int) -> dict[str, float]:
    c = constants
    if c.eta_tilde > c.max_step:
        raise StepSizeError(
            f"effective step size {c.eta_tilde} violates eta_tilde <= 1/(c0 L) = {c.max_step}"
        )
    return {
        "transient": (1.0 - c.mu * c.eta_tilde / 8.0) ** R * c.h0,
        "variance": c.C * c.eta_tilde * c.V / c.mu,
        "floor": c.C * c.eps_w**2 * c.G**2 / c.mu,
    }


def bias_floor_rhs(constants: TheoryConstants, R: int) -> float:
    """Right-hand side of the last-iterate suboptimality bound after R rounds."""
    t = bias_floor_terms(constants, R)
    return t["transient"] + t["variance"] + t["floor"]


def residual_weight_error(p_true, p_hat) -> tuple[np.ndarray, float]:
    """Ratios rho_i = p_true_i / p_hat_i and eps_w = max |rho_i - 1|."""
    p_true = np.asarray(p_true, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    if np.any(p_hat <= 0):
        raise ValueError("p_hat must be positive")
    rho = p_true / p_hat
    return rho, float(np.max(np.abs(rho - 1.0))) if rho.size else 0.0


def participation_patterns(n: int) -> np.ndarray:
    """All 2^n inclusion patterns as a boolean (2^n, n) array."""
    codes = np.arange(2**n, dtype=np.int64)[:, None]
    return ((codes >> np.arange(n)) & 1).astype(bool)


Estimator = Callable[[np.ndarray, np.ndarray], np.ndarray]


def enumerate_ipw_expectation(
    deltas,
    p_true,
    estimator="oracle",
    condition_nonempty: bool = False,
    max_clients: int = 20,
) -> np.ndarray:
    """Exact expectation of an aggregate over independent Bernoulli(p_true) inclusion.

    ``estimator`` is ``"oracle"`` (weights 1/(N p)), ``"naive"`` (mean of the
    included deltas), a weight vector ``w`` (estimate ``sum_i A_i w_i delta_i``)
    or a callable ``f(A, deltas)``. With ``condition_nonempty`` the expectation
    is taken given at least one inclusion, matching the empty-round skip.
    """
    deltas = np.asarray(deltas, dtype=float)
    scalar = deltas.ndim == 1
    D = deltas.reshape(deltas.shape[0], -1)
    p = np.asarray(p_true, dtype=float)
    n = D.shape[0]
    if p.shape != (n,):
        raise ValueError("one inclusion probability per client is required")
    if n > max_clients:
        raise EnumerationTooLarge(f"{n} clients is too many to enumerate; use Monte Carlo instead")
    A = participation_patterns(n)
    prob = np.prod(np.where(A, p, 1.0 - p), axis=1)
    sizes = A.sum(axis=1)
    if isinstance(estimator, str) and estimator == "naive":
        with np.errstate(invalid="ignore", divide="ignore"):
            values = (A @ D) / sizes[:, None]
        values[sizes == 0] = 0.0
    elif isinstance(estimator, str) and estimator == "oracle":
        values = A @ (D / (n * p[:, None]))
    elif callable(estimator):
        values = np.array([np.asarray(estimator(a, D), float).reshape(-1) if a.any() else np.zeros(D.shape[1]) for a in A])
    else:
        w = np.asarray(estimator, dtype=float)
        values = A @ (w[:, None] * D)
    if condition_nonempty:
        keep = sizes > 0
        prob, values = prob[keep], values[keep]
        prob = prob / prob.sum()
    out = prob @ values
    return float(out[0]) if scalar else out


def local_gd_quadratic(theta: float, center, mu: float, eta: float, K: int) -> np.ndarray:
    """Deltas after K exact gradient steps on mu/2 (y - c)^2 from theta."""
    y = np.full(np.shape(center), float(theta))
    for _ in range(K):
        y = y - eta * mu * (y - center)
    return y - theta


def expected_two_client_training(
    instance: TwoClientInstance,
    method: str,
    part_prob=(0.6, 0.3),
    rounds: int = 400,
    local_steps: int = 5,
    local_step_size: float = 0.1,
    server_step_size: float = 1.0,
    theta0: float = 1.0,
) -> np.ndarray:
    """Training on the two-client instance driven by the exact expected aggregate.

    Enrollment probabilities are ``(1 + eps, 1 - eps) / 2`` and gradients are
    deterministic, so each round applies the expectation of the aggregate over
    all inclusion patterns. ``round_only_ipw`` divides by ``pi_part`` only,
    ``fedipw`` and ``oracle_ipw`` by the full two-stage probability; both use
    the population size as divisor. Returns the iterates, ``theta0`` first.
    """
    from .federation import aggregate_ipw

    enroll = instance.rho / 2.0
    part = np.asarray(part_prob, dtype=float)
    p_true = enroll * part
    if method == "round_only_ipw":
        p_used = part
    elif method in ("fedipw", "oracle_ipw"):
        p_used = p_true
    else:
        raise ConfigurationError(f"unsupported method {method!r}")
    N = 2

    def estimate(a, D):
        return aggregate_ipw(D[a], p_used[a], N)

    thetas = [float(theta0)]
    theta = float(theta0)
    for _ in range(rounds):
        deltas = local_gd_quadratic(theta, instance.centers, instance.mu, local_step_size, local_steps)
        theta = theta + server_step_size * enumerate_ipw_expectation(deltas, p_true, estimate)
        thetas.append(theta)
    return np.array(thetas)
