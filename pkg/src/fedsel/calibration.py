"""Aggregate calibration of enrolled clients to known population moments.

Weights ``q`` on the enrolled clients are the point closest to uniform that
sums to one, is nonnegative, and reproduces the target moments ``mu_b`` of a
balance map ``b(z)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls
from scipy.special import ndtri

from . import rng
from .errors import (
    DegenerateConstraintsError,
    DimensionError,
    InfeasibleCalibrationError,
    InvariantViolation,
)

log = logging.getLogger(__name__)

SUM_TOL = 1e-10
MOMENT_TOL = 1e-8
FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class CalibrationSpec:
    """Balance map ``identity`` (z itself) or ``identity+bins`` (z plus one-hot bins of z_1).

    Bin edges are standard-normal quantiles, so each bin has population mass
    ``1/bins`` under the default covariate law.
    """

    balance_map: str = "identity"
    bins: int = 3
    covariate_dim: int = 2
    target_moments: tuple[float, ...] | None = None
    moment_noise_sigma: float = 0.0

    @property
    def bin_edges(self) -> np.ndarray:
        return ndtri(np.arange(1, self.bins) / self.bins)

    @property
    def num_moments(self) -> int:
        return self.covariate_dim + (self.bins if self.balance_map == "identity+bins" else 0)


def evaluate_balance_map(spec: CalibrationSpec, z) -> np.ndarray:
    """b(z) for one covariate vector or row-wise for a matrix."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != spec.covariate_dim:
        raise DimensionError(f"z has {z.shape[-1]} coordinates, expected {spec.covariate_dim}")
    if spec.balance_map == "identity":
        return z.copy()
    if spec.balance_map == "identity+bins":
        which = np.searchsorted(spec.bin_edges, z[..., 0], side="right")
        onehot = np.eye(spec.bins)[which]
        return np.concatenate([z, onehot], axis=-1)
    raise ValueError(f"unknown balance map {spec.balance_map!r}")


@dataclass
class CalibrationWeights:
    weights: np.ndarray
    lagrange: np.ndarray
    active_set: np.ndarray  # indices pinned at zero
    constraint_residual: float = 0.0
    slack_norm: float = 0.0
    target_used: np.ndarray | None = field(default=None, repr=False)


def _constraints(b_rows: np.ndarray, mu_b: np.ndarray):
    A = np.vstack([np.ones(b_rows.shape[0]), b_rows.T])
    c = np.r_[1.0, mu_b]
    return A, c


def _project_affine(A: np.ndarray, c: np.ndarray, u: np.ndarray):
    """Closest point to ``u`` on ``{q : A q = c}`` and the multipliers of ``|q - u|^2``."""
    G = A @ A.T
    if np.linalg.matrix_rank(G) < G.shape[0]:
        raise DegenerateConstraintsError("calibration constraints are rank deficient")
    nu = np.linalg.solve(G, c - A @ u)
    q = u + A.T @ nu
    # one refinement pass tightens the equality residual to ~1e-15
    q = q + A.T @ np.linalg.solve(G, c - A @ q)
    return q, 2.0 * nu


def _dual_objective(A, c, u, nu) -> float:
    s = np.maximum(u + A.T @ nu, 0.0)
    return float(-0.5 * s @ s + nu @ c)


def solve_calibration_weights(b_rows, mu_b, max_iter: int = 200) -> CalibrationWeights:
    """min sum (q_i - 1/n)^2  s.t.  sum q = 1, sum q_i b_i = mu_b, q >= 0.

    The minimizer has the form ``q = max(0, 1/n + A^T nu)`` for multipliers
    ``nu`` of the equality rows ``A``. The concave dual in ``nu`` (at most a
    few coordinates) is maximized by semismooth Newton with backtracking;
    clients at zero form the active set. The free weights are then
    re-projected onto the equalities so the residual sits at rounding level.
    """
    b_rows = np.asarray(b_rows, dtype=float)
    if b_rows.ndim == 1:
        b_rows = b_rows[:, None]
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=float))
    n, q_dim = b_rows.shape
    if mu_b.shape != (q_dim,):
        raise DimensionError(f"mu_b has shape {mu_b.shape}, expected ({q_dim},)")
    if n < q_dim + 1:
        raise DegenerateConstraintsError(f"need at least {q_dim + 1} enrolled clients, got {n}")
    A, c = _constraints(b_rows, mu_b)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise DegenerateConstraintsError("calibration constraints are rank deficient")
    u = np.full(n, 1.0 / n)
    nu = np.zeros(A.shape[0])
    scale = 1.0 + float(np.abs(c).max())
    for _ in range(max_iter):
        s = u + A.T @ nu
        free = s > 0
        resid = c - A @ np.maximum(s, 0.0)
        if np.abs(resid).max() <= 1e-14 * scale:
            break
        H = A[:, free] @ A[:, free].T
        H += 1e-12 * (np.trace(H) + 1.0) * np.eye(H.shape[0])
        step = np.linalg.solve(H, resid)
        g0 = _dual_objective(A, c, u, nu)
        slope = float(resid @ step)
        t = 1.0
        while _dual_objective(A, c, u, nu + t * step) < g0 + 1e-4 * t * slope and t > 1e-12:
            t *= 0.5
        nu = nu + t * step
    free = u + A.T @ nu > 0
    if free.sum() >= 1 and np.linalg.matrix_rank(A[:, free]) == A.shape[0]:
        q_free, _ = _project_affine(A[:, free], c, u[free])
    else:
        q_free = np.maximum(u + A.T @ nu, 0.0)[free]
    q = np.zeros(n)
    q[free] = np.maximum(q_free, 0.0)
    residual = float(np.max(np.abs(A @ q - c)))
    if residual > FEASIBILITY_TOL:
        raise InfeasibleCalibrationError("target moments are outside the convex hull of enrolled rows")
    # multipliers of the objective sum (q - u)^2, hence the factor 2
    return CalibrationWeights(q, 2.0 * nu, np.flatnonzero(~free), residual, 0.0, mu_b)


def project_to_hull(b_rows, mu_b) -> np.ndarray:
    """Closest point to ``mu_b`` in the convex hull of ``b_rows``."""
    b_rows = np.asarray(b_rows, dtype=float)
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=float))
    scale = 1e3 * (1.0 + np.abs(b_rows).max())
    M = np.vstack([b_rows.T, np.full(b_rows.shape[0], scale)])
    w, _ = nnls(M, np.r_[mu_b, scale], maxiter=50 * b_rows.shape[0])
    w = w / w.sum()
    return w @ b_rows


def calibrate(b_rows, mu_b, on_infeasible: str = "project") -> CalibrationWeights:
    """Calibration weights, projecting ``mu_b`` into the hull when infeasible.

    The projected target is pulled ``1e-6`` of the way toward the enrolled mean
    so that it lies strictly inside the hull. The distance between the
    requested and used targets is reported as ``slack_norm``.
    """
    b_rows = np.asarray(b_rows, dtype=float)
    if b_rows.ndim == 1:
        b_rows = b_rows[:, None]
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=float))
    try:
        return solve_calibration_weights(b_rows, mu_b)
    except InfeasibleCalibrationError:
        if on_infeasible != "project":
            raise
    center = b_rows.mean(axis=0)
    target = mu_b
    for shrink in (1e-6, 1e-4, 1e-2, 1e-1, 0.5):
        target = project_to_hull(b_rows, mu_b)
        target = target + shrink * (center - target)
        try:
            out = solve_calibration_weights(b_rows, target)
        except InfeasibleCalibrationError:
            continue
        out.slack_norm = float(np.linalg.norm(mu_b - target))
        log.info("calibration target projected into hull, slack %.3g", out.slack_norm)
        return out
    raise InfeasibleCalibrationError("could not project target moments into the hull")


def calibrated_round_update(
    weights: dict[int, float] | np.ndarray,
    participants,
    deltas,
    part_hat,
    enrolled=None,
    hajek: bool = False,
) -> np.ndarray:
    """sum over participants of q_i * delta_i / part_hat_i.

    ``weights`` maps client id to q (or is a full-length array with zeros for
    non-enrolled clients). ``deltas`` and ``part_hat`` are aligned with
    ``participants``.
    """
    participants = np.asarray(participants, dtype=int)
    deltas = np.asarray(deltas, dtype=float).reshape(len(participants), -1)
    part_hat = np.asarray(part_hat, dtype=float)
    if isinstance(weights, dict):
        missing = [int(i) for i in participants if int(i) not in weights]
        if missing:
            raise InvariantViolation(f"participants {missing} are not enrolled")
        q = np.array([weights[int(i)] for i in participants], dtype=float)
    else:
        weights = np.asarray(weights, dtype=float)
        if enrolled is not None and not np.all(np.asarray(enrolled, bool)[participants]):
            raise InvariantViolation("a participant is not enrolled")
        q = weights[participants]
    if len(participants) and part_hat.min() <= 0:
        raise InvariantViolation("participation probabilities must be positive")
    coef = q / part_hat
    total = coef @ deltas if len(participants) else np.zeros(deltas.shape[1])
    if hajek:
        denom = coef.sum()
        return total / denom if denom > 0 else total
    return total


def perturb_moments(mu_b, sigma: float, seed: int, tag: str = "moment-noise") -> np.ndarray:
    """``mu_b + sigma * g`` with ``g`` standard normal, keyed by ``seed``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=float))
    if sigma == 0:
        return mu_b.copy()
    g = rng.normal(seed, tag, np.arange(mu_b.size, dtype=np.uint64))
    return mu_b + sigma * g


def write_weights_csv(weights: CalibrationWeights, client_ids, path) -> None:
    pinned = set(int(i) for i in weights.active_set)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "q", "pinned_flag"])
        for local, cid in enumerate(client_ids):
            w.writerow([int(cid), repr(float(weights.weights[local])), int(local in pinned)])


def write_diagnostics_csv(weights: CalibrationWeights, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["constraint_residual", "slack_norm", "active_set_size"])
        w.writerow([repr(weights.constraint_residual), repr(weights.slack_norm), len(weights.active_set)])
