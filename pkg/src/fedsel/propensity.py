"""Enrollment and participation propensity models.

Both stages are fitted as ridge-penalized logistic regressions by IRLS.
Enrollment is fitted once on the full population's ``z``; participation is
refitted every round on enrolled clients over a trailing window of rounds.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DegenerateDataError, NumericalError
from .selection import SelectionTrace
from .synthgen import Population

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PropensityConfig:
    clip_floor: float = 0.05
    ridge: float = 1e-6
    window: int = 50
    tol: float = 1e-8
    max_iter: int = 50


@dataclass(frozen=True)
class LogisticFit:
    intercept: float
    coefficients: np.ndarray
    ridge: float
    clip_floor: float = 0.05
    converged: bool = True
    iterations: int = 0

    def linear_predictor(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        return self.intercept + features @ self.coefficients

    def predict_raw(self, features) -> np.ndarray:
        return expit(self.linear_predictor(features))

    def predict(self, features) -> np.ndarray:
        """Predicted probabilities clipped to ``[clip_floor, 1]``."""
        return np.clip(self.predict_raw(features), self.clip_floor, 1.0)


def _penalized_nll(design, y, beta, penalty) -> float:
    s = design @ beta
    nll = np.sum(np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s))) - y * s)
    return float(nll + 0.5 * beta @ (penalty * beta))


def fit_logistic(
    features,
    labels,
    ridge: float = 1e-6,
    tol: float = 1e-8,
    max_iter: int = 50,
    clip_floor: float = 0.05,
    init: LogisticFit | None = None,
) -> LogisticFit:
    """IRLS for a logistic model with an unpenalized intercept.

    The objective is the summed negative log-likelihood plus
    ``ridge/2 * |coefficients|^2``. Each Newton step is halved until the
    objective does not increase. Hitting ``max_iter`` returns the current
    iterate with ``converged=False``.
    """
    y = np.asarray(labels, dtype=float).ravel()
    X = np.asarray(features, dtype=float).reshape(len(y), -1)
    if len(y) == 0:
        raise DegenerateDataError("no samples to fit")
    if not ridge > 0:
        raise ValueError("ridge must be > 0")
    n, d = X.shape
    design = np.hstack([np.ones((n, 1)), X])
    penalty = np.r_[0.0, np.full(d, ridge)]
    if init is not None and init.coefficients.shape == (d,):
        beta = np.r_[init.intercept, init.coefficients]
    else:
        beta = np.zeros(d + 1)
    obj = _penalized_nll(design, y, beta, penalty)
    converged = False
    separable = y.min() == y.max()
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(design @ beta)
        grad = design.T @ (p - y) + penalty * beta
        hess = (design * (p * (1.0 - p))[:, None]).T @ design + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            if separable:
                # the unpenalized intercept diverges; keep the last finite iterate
                break
            raise NumericalError(f"singular IRLS system at iteration {it}") from exc
        if not np.all(np.isfinite(step)):
            raise NumericalError(f"non-finite IRLS step at iteration {it}")
        t = 1.0
        while True:
            cand = beta - t * step
            cand_obj = _penalized_nll(design, y, cand, penalty)
            if cand_obj <= obj or t < 1e-10:
                break
            t *= 0.5
        moved = float(np.max(np.abs(cand - beta)))
        if cand_obj <= obj:
            beta, obj = cand, cand_obj
        if moved < tol:
            converged = True
            break
    return LogisticFit(float(beta[0]), beta[1:].copy(), ridge, clip_floor, converged, it)


def fit_enrollment_model(pop: Population, enrolled, config: PropensityConfig = PropensityConfig()) -> LogisticFit:
    """Enrollment propensity from ``(z_i, E_i)`` over the whole population."""
    e = np.asarray(enrolled, dtype=float)
    if e.min() == e.max():
        raise DegenerateDataError("enrollment is constant; both classes are needed")
    return fit_logistic(pop.z, e, config.ridge, config.tol, config.max_iter, config.clip_floor)


def participation_design(pop: Population, trace: SelectionTrace, round_index: int, window: int):
    """Stacked ``(z_i ⊕ x_{i,r}, A_{i,r})`` rows for enrolled clients over the window."""
    first = max(1, round_index - window + 1)
    enrolled = np.flatnonzero(trace.enrolled)
    rows = []
    labels = []
    for r in range(first, round_index + 1):
        x = trace.preround[r - 1, enrolled]
        rows.append(np.hstack([pop.z[enrolled], x]))
        labels.append(trace.participated[r - 1, enrolled])
    if not rows or len(enrolled) == 0:
        return np.zeros((0, pop.z.shape[1] + trace.preround.shape[2])), np.zeros(0)
    return np.vstack(rows), np.concatenate(labels).astype(float)


def fit_participation_model(
    pop: Population,
    trace: SelectionTrace,
    round_index: int,
    config: PropensityConfig = PropensityConfig(),
    init: LogisticFit | None = None,
) -> LogisticFit:
    design, labels = participation_design(pop, trace, round_index, config.window)
    if len(labels) == 0 or labels.min() == labels.max():
        raise DegenerateDataError(f"participation labels degenerate up to round {round_index}")
    return fit_logistic(design, labels, config.ridge, config.tol, config.max_iter, config.clip_floor, init)


@dataclass(frozen=True)
class InclusionEstimate:
    p_hat: np.ndarray
    enroll_hat: np.ndarray
    part_hat: np.ndarray


def plug_in_inclusion(enroll_fit: LogisticFit, part_fit: LogisticFit, pop: Population, x_round) -> InclusionEstimate:
    enroll_hat = enroll_fit.predict(pop.z)
    part_hat = part_fit.predict(np.hstack([pop.z, np.asarray(x_round, dtype=float)]))
    return InclusionEstimate(enroll_hat * part_hat, enroll_hat, part_hat)


def constant_fit(rate: float, dim: int, config: PropensityConfig) -> LogisticFit:
    """Covariate-free model predicting ``rate`` everywhere (fallback)."""
    rate = float(np.clip(rate, 1e-12, 1 - 1e-12))
    return LogisticFit(float(np.log(rate / (1 - rate))), np.zeros(dim), config.ridge, config.clip_floor, True, 0)


@dataclass
class PropensityPath:
    """Fitted propensities for every round of one selection trace."""

    enroll_fit: LogisticFit
    enroll_hat: np.ndarray  # (N,) clipped
    part_fits: list[LogisticFit]
    part_hat: np.ndarray  # (R, N) clipped
    fallbacks: list[str] = field(default_factory=list)

    def inclusion(self, round_index: int) -> np.ndarray:
        return self.enroll_hat * self.part_hat[round_index - 1]


def estimate_propensity_path(pop: Population, trace: SelectionTrace, config: PropensityConfig = PropensityConfig()) -> PropensityPath:
    fallbacks = []
    try:
        enroll_fit = fit_enrollment_model(pop, trace.enrolled, config)
    except (DegenerateDataError, NumericalError) as exc:
        log.warning("enrollment fit failed (%s); using the enrolled fraction", exc)
        fallbacks.append(f"enroll:{exc}")
        enroll_fit = constant_fit(trace.enrolled.mean(), pop.z.shape[1], config)
    dim = pop.z.shape[1] + trace.preround.shape[2]
    fits: list[LogisticFit] = []
    part_hat = np.empty(trace.participated.shape)
    prev = None
    for r in range(1, trace.rounds + 1):
        try:
            fit = fit_participation_model(pop, trace, r, config, init=prev)
        except (DegenerateDataError, NumericalError) as exc:
            fallbacks.append(f"round {r}:{exc}")
            if prev is not None:
                fit = prev
            else:
                _, labels = participation_design(pop, trace, r, config.window)
                fit = constant_fit(labels.mean() if len(labels) else 0.5, dim, config)
        fits.append(fit)
        prev = fit
        part_hat[r - 1] = fit.predict(np.hstack([pop.z, trace.preround[r - 1]]))
    return PropensityPath(enroll_fit, enroll_fit.predict(pop.z), fits, part_hat, fallbacks)


def write_fits_csv(path_obj: PropensityPath, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "round", "intercept", "coefficients", "converged", "iterations"])

        def row(tag, r, fit):
            coefs = " ".join(repr(float(c)) for c in fit.coefficients)
            w.writerow([tag, r, repr(fit.intercept), coefs, int(fit.converged), fit.iterations])

        row("enroll", 0, path_obj.enroll_fit)
        for r, fit in enumerate(path_obj.part_fits, start=1):
            row("participation", r, fit)
