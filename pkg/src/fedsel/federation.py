"""Local SGD, server aggregation rules and the federated training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from . import rng
from .calibration import CalibrationSpec, calibrate, calibrated_round_update, evaluate_balance_map, perturb_moments
from .errors import ConfigurationError, DimensionError, InvariantViolation, NumericalError
from .propensity import PropensityConfig, PropensityPath, estimate_propensity_path
from .selection import SelectionSpec, SelectionTrace, simulate_selection
from .synthgen import ClientRecord, OracleSolution, Population, client_losses

log = logging.getLogger(__name__)

METHODS = ("naive", "round_only_ipw", "fedipw", "oracle_ipw", "calibrated")

# test hook: gradient(ids, params, batch_rows) -> (P, m) replaces the logistic gradient
GradientFn = Callable[[np.ndarray, np.ndarray, "np.ndarray | None"], np.ndarray]


@dataclass(frozen=True)
class TrainingConfig:
    local_steps: int = 5
    local_step_size: float = 0.1
    server_step_size: float = 1.0
    rounds: int = 300
    batch_size: int | None = 32  # None means full-batch gradients
    method: str = "fedipw"
    seed: int = 0
    round_only_divisor: str = "enrolled"  # or "population"
    population_size: int | None = None  # stand-in for N in the fedipw divisor
    participation_source: str = "estimated"  # or "true"
    hajek: bool = False

    @property
    def effective_step_size(self) -> float:
        return self.local_steps * self.server_step_size * self.local_step_size

    def validate(self) -> None:
        if self.local_steps < 1:
            raise ConfigurationError("local_steps must be >= 1", key="local_steps")
        if self.local_step_size < 0:
            raise ConfigurationError("local_step_size must be >= 0", key="local_step_size")
        if self.server_step_size < 1:
            raise ConfigurationError("server_step_size must be >= 1", key="server_step_size")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1", key="rounds")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1 or full", key="batch_size")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}", key="method")
        if self.round_only_divisor not in ("enrolled", "population"):
            raise ConfigurationError("round_only_divisor must be enrolled or population", key="round_only_divisor")
        if self.participation_source not in ("estimated", "true"):
            raise ConfigurationError("participation_source must be estimated or true", key="participation_source")


@dataclass(frozen=True)
class RoundUpdate:
    client_id: int
    delta: np.ndarray


@dataclass
class ServerState:
    theta: np.ndarray
    round: int = 0
    history: list[dict] = field(default_factory=list)


def _logistic_grad(features, labels, params, lam) -> np.ndarray:
    r = expit((features @ params[:, :, None])[:, :, 0]) - labels
    return (r[:, None, :] @ features)[:, 0, :] / features.shape[1] + lam * params


def _local_sgd(features, labels, rows_of, ids, theta, config, round_index, lam, grad_fn):
    """K local steps for clients ``ids``; ``rows_of[p]`` indexes client p's data in ``features``."""
    params = np.tile(theta, (len(ids), 1))
    if len(ids) == 0:
        return params
    n = features.shape[1]
    K = config.local_steps
    if config.batch_size is None:
        rows = None
        feats, labs = features[rows_of], labels[rows_of]
    else:
        steps = np.arange(K, dtype=np.uint64)[None, :, None]
        b = np.arange(config.batch_size, dtype=np.uint64)[None, None, :]
        rows = rng.integers(n, config.seed, "sgd", round_index, ids.astype(np.uint64)[:, None, None], steps, b)
        feats = features[rows_of[:, None, None], rows]  # (P, K, B, m)
        labs = labels[rows_of[:, None, None], rows]
    for k in range(K):
        if grad_fn is not None:
            g = grad_fn(ids, params, None if rows is None else rows[:, k])
        elif rows is None:
            g = _logistic_grad(feats, labs, params, lam)
        else:
            g = _logistic_grad(feats[:, k], labs[:, k], params, lam)
        params = params - config.local_step_size * g
    return params - theta


def local_updates(
    pop: Population,
    ids,
    theta,
    config: TrainingConfig,
    round_index: int,
    lam: float,
    grad_fn: GradientFn | None = None,
) -> np.ndarray:
    """Model deltas ``y_K - theta`` for clients ``ids``; shape (len(ids), m).

    Minibatch rows are drawn with replacement from the stream keyed by
    (seed, round, client, step), so a client's delta does not depend on
    which other clients ran in the same round.
    """
    ids = np.asarray(ids, dtype=np.int64)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (pop.feature_dim,):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({pop.feature_dim},)")
    return _local_sgd(pop.features, pop.labels, ids, ids, theta, config, round_index, lam, grad_fn)


def local_update(
    client: ClientRecord,
    theta,
    config: TrainingConfig,
    round_index: int = 1,
    lam: float = 1e-2,
    grad_fn: GradientFn | None = None,
) -> RoundUpdate:
    """Single-client form of :func:`local_updates`."""
    features = np.asarray(client.features, float)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (features.shape[1],):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({features.shape[1]},)")
    ids = np.array([client.id], dtype=np.int64)
    labels = np.asarray(client.labels, float)[None, :]
    delta = _local_sgd(features[None], labels, np.zeros(1, np.int64), ids, theta, config, round_index, lam, grad_fn)
    return RoundUpdate(client.id, delta[0])


def aggregate_naive(deltas) -> np.ndarray | None:
    """Equal-weight mean of the returned deltas; ``None`` for an empty round."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.shape[0] == 0:
        return None
    return np.mean(deltas, axis=0)


def aggregate_ipw(deltas, probs, population_size: float) -> np.ndarray:
    """(1/N) * sum_i delta_i / p_i over the returned deltas."""
    deltas = np.asarray(deltas, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if deltas.shape[0] != probs.shape[0]:
        raise DimensionError("one probability per returned delta is required")
    if probs.size and not np.all(probs > 0):
        raise InvariantViolation("inclusion probabilities must be positive")
    coef = 1.0 / (population_size * probs)
    return coef @ deltas.reshape(len(probs), -1)


def server_step(
    state: ServerState,
    aggregate,
    gamma: float,
    metrics: Callable[[np.ndarray], dict] | None = None,
    extra: dict | None = None,
) -> ServerState:
    """theta <- theta + gamma * aggregate; appends one metrics row when ``metrics`` is given."""
    aggregate = np.asarray(aggregate, dtype=float)
    if not np.all(np.isfinite(aggregate)):
        raise NumericalError(
            f"non-finite aggregate at round {state.round + 1}: "
            f"theta={state.theta.tolist()} aggregate={aggregate.tolist()}"
        )
    theta = state.theta + gamma * aggregate
    new = ServerState(theta, state.round + 1, state.history)
    if metrics is not None:
        row = {"round": new.round}
        row.update(extra or {})
        row.update(metrics(theta))
        new.history.append(row)
    return new


@dataclass(frozen=True)
class EstimationConfig:
    propensity: PropensityConfig = PropensityConfig()
    calibration: CalibrationSpec = CalibrationSpec()


@dataclass
class TrainingResult:
    state: ServerState
    metrics: list[dict]
    rho: list[np.ndarray]  # per-round ratios p_true / p_used over enrolled clients
    calibration: object | None = None
    skipped_rounds: list[int] = field(default_factory=list)


def calibration_weights_for(pop: Population, trace: SelectionTrace, spec: CalibrationSpec, seed: int):
    """Weights over enrolled clients (in ascending id order) for the configured targets."""
    spec = replace(spec, covariate_dim=pop.z.shape[1])
    b_all = evaluate_balance_map(spec, pop.z)
    mu = np.asarray(spec.target_moments, float) if spec.target_moments is not None else b_all.mean(axis=0)
    mu = perturb_moments(mu, spec.moment_noise_sigma, seed)
    enrolled = np.flatnonzero(trace.enrolled)
    return enrolled, calibrate(b_all[enrolled], mu)


def run_training(
    pop: Population,
    selection_spec: SelectionSpec,
    config: TrainingConfig,
    oracle: OracleSolution,
    estimation: EstimationConfig = EstimationConfig(),
    *,
    lam: float | None = None,
    trace: SelectionTrace | None = None,
    path: PropensityPath | None = None,
    theta0=None,
) -> TrainingResult:
    """Train for ``config.rounds`` rounds with the configured aggregation method.

    ``trace`` and ``path`` may be passed in so several methods share one
    selection draw and one set of propensity fits.
    """
    config.validate()
    if lam is None:
        lam = pop.spec.ridge if pop.spec is not None else 1e-2
    N = len(pop)
    if trace is None:
        trace = simulate_selection(selection_spec, pop, config.rounds, config.seed)
    if trace.rounds < config.rounds:
        raise ConfigurationError("selection trace is shorter than the configured rounds", key="rounds")
    method = config.method
    needs_path = method == "fedipw" or method in ("round_only_ipw", "calibrated") and config.participation_source == "estimated"
    if needs_path and path is None:
        path = estimate_propensity_path(pop, trace, estimation.propensity)
    weights = None
    q_full = None
    if method == "calibrated":
        enrolled_ids, weights = calibration_weights_for(pop, trace, estimation.calibration, config.seed)
        q_full = np.zeros(N)
        q_full[enrolled_ids] = weights.weights
    n_enrolled = int(trace.enrolled.sum())
    theta_star = oracle.theta_star
    enrolled_mask = trace.enrolled

    def evaluate(theta):
        return {
            "target_loss": float(np.mean(client_losses(pop, theta, lam))),
            "dist_to_opt": float(np.linalg.norm(theta - theta_star)),
        }

    state = ServerState(np.zeros(pop.feature_dim) if theta0 is None else np.array(theta0, float))
    rho_log = []
    skipped = []
    for r in range(1, config.rounds + 1):
        S = trace.participants(r)
        p_true = trace.inclusion[r - 1]
        if config.participation_source == "true" or method in ("naive", "oracle_ipw"):
            part = trace.part_prob[r - 1]
        else:
            part = path.part_hat[r - 1]
        if method == "naive":
            p_used = np.full(N, max(len(S), 1) / N)
        elif method == "round_only_ipw":
            p_used = part
        elif method == "fedipw":
            enroll_hat = path.enroll_hat
            p_used = enroll_hat * part
        elif method == "oracle_ipw":
            p_used = p_true
        else:
            with np.errstate(divide="ignore"):
                p_used = np.where(q_full > 0, part / (N * q_full), np.inf)
        rho = p_true[enrolled_mask] / p_used[enrolled_mask]
        rho_log.append(rho)
        extra = {
            "method": method,
            "participants": int(len(S)),
            "max_rho_err": float(np.max(np.abs(rho - 1.0))) if rho.size else 0.0,
        }
        if len(S) == 0:
            log.warning("round %d has no participants; server step skipped", r)
            skipped.append(r)
            state = ServerState(state.theta, r, state.history)
            state.history.append({"round": r, **extra, "mean_weight": 0.0, **evaluate(state.theta)})
            continue
        deltas = local_updates(pop, S, state.theta, config, r, lam)
        if method == "naive":
            agg = aggregate_naive(deltas)
            coef = np.full(len(S), 1.0 / len(S))
        elif method == "round_only_ipw":
            divisor = n_enrolled if config.round_only_divisor == "enrolled" else N
            agg = aggregate_ipw(deltas, part[S], divisor)
            coef = 1.0 / (divisor * part[S])
        elif method == "fedipw":
            divisor = config.population_size or N
            agg = aggregate_ipw(deltas, p_used[S], divisor)
            coef = 1.0 / (divisor * p_used[S])
        elif method == "oracle_ipw":
            agg = aggregate_ipw(deltas, p_true[S], N)
            coef = 1.0 / (N * p_true[S])
        else:
            agg = calibrated_round_update(q_full, S, deltas, part[S], enrolled=enrolled_mask, hajek=config.hajek)
            coef = q_full[S] / part[S]
            if config.hajek and coef.sum() > 0:
                coef = coef / coef.sum()
        extra["mean_weight"] = float(np.mean(coef))
        state = server_step(state, agg, config.server_step_size, evaluate, extra)
    return TrainingResult(state, state.history, rho_log, weights, skipped)
