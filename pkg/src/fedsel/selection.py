"""Two-stage client selection: one-shot enrollment, then per-round participation.

Enrollment depends only on the pre-enrollment covariates ``z``; participation
among enrolled clients depends on ``z`` and the pre-round covariates ``x``.
The per-round inclusion probability is the product of the two stages.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import rng
from .errors import ConfigurationError, DimensionError, InvariantViolation
from .synthgen import Population

LINK_CLAMP = 30.0


@dataclass(frozen=True)
class SelectionSpec:
    enroll_intercept: float = 0.0
    enroll_coef: tuple[float, ...] = (1.0, 0.0)
    bias_scale: float = 1.0
    part_intercept: float = -0.5
    part_coef_z: tuple[float, ...] = (0.0, 1.0)
    part_coef_x: tuple[float, ...] = (0.8, -0.5)
    preround_dim: int = 2
    # X = mix * M z + noise, with M the (d_x, d_z) leading identity block
    mix: float = 0.0

    def validate(self, covariate_dim: int | None = None) -> None:
        if self.bias_scale < 0:
            raise ConfigurationError("bias_scale must be >= 0", key="bias_scale")
        if self.preround_dim < 1:
            raise ConfigurationError("preround_dim must be >= 1", key="preround_dim")
        if len(self.part_coef_x) != self.preround_dim:
            raise ConfigurationError(
                f"part_coef_x has length {len(self.part_coef_x)}, expected {self.preround_dim}",
                key="part_coef_x",
            )
        if len(self.enroll_coef) != len(self.part_coef_z):
            raise ConfigurationError("enroll_coef and part_coef_z lengths differ", key="part_coef_z")
        if covariate_dim is not None and len(self.enroll_coef) != covariate_dim:
            raise ConfigurationError(
                f"enroll_coef has length {len(self.enroll_coef)}, expected {covariate_dim}",
                key="enroll_coef",
            )


@dataclass
class SelectionTrace:
    """Enrollment flags plus per-round covariates, participation and true probabilities.

    Round-indexed arrays have a leading axis of length ``rounds``; row ``r - 1``
    belongs to round ``r``.
    """

    enrolled: np.ndarray  # (N,) bool
    enroll_prob: np.ndarray  # (N,)
    preround: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))  # (R, N, d_x)
    participated: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), bool))  # (R, N)
    part_prob: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (R, N)
    inclusion: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (R, N)

    @property
    def rounds(self) -> int:
        return self.participated.shape[0]

    def participants(self, round_index: int) -> np.ndarray:
        """Ascending ids of the clients included at ``round_index`` (1-based)."""
        return np.flatnonzero(self.participated[round_index - 1])

    def check(self) -> None:
        if np.any(self.participated & ~self.enrolled[None, :]):
            raise InvariantViolation("participation recorded for a non-enrolled client")
        if not np.array_equal(self.inclusion, self.enroll_prob[None, :] * self.part_prob):
            raise InvariantViolation("inclusion probability does not factorize")


def _link(eta) -> np.ndarray:
    return expit(np.clip(eta, -LINK_CLAMP, LINK_CLAMP))


def enrollment_probability(spec: SelectionSpec, z) -> np.ndarray | float:
    """P(E = 1 | z); accepts one covariate vector or an (N, d_z) matrix."""
    z = np.asarray(z, dtype=float)
    alpha = np.asarray(spec.enroll_coef, dtype=float)
    if z.shape[-1] != alpha.shape[0]:
        raise DimensionError(f"z has {z.shape[-1]} coordinates, expected {alpha.shape[0]}")
    p = _link(spec.enroll_intercept + spec.bias_scale * (z @ alpha))
    return float(p) if np.ndim(p) == 0 else p


def participation_probability(spec: SelectionSpec, z, x) -> np.ndarray | float:
    """P(A = 1 | E = 1, z, x); broadcasts over leading axes."""
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    bz = np.asarray(spec.part_coef_z, dtype=float)
    bx = np.asarray(spec.part_coef_x, dtype=float)
    if z.shape[-1] != bz.shape[0] or x.shape[-1] != bx.shape[0]:
        raise DimensionError(
            f"covariate dimensions ({z.shape[-1]}, {x.shape[-1]}) "
            f"do not match coefficients ({bz.shape[0]}, {bx.shape[0]})"
        )
    p = _link(spec.part_intercept + z @ bz + x @ bx)
    return float(p) if np.ndim(p) == 0 else p


def draw_enrollment(spec: SelectionSpec, pop: Population, seed: int):
    """Independent enrollment draws, one keyed stream per client.

    Returns ``(enrolled, enroll_prob)``.
    """
    prob = np.atleast_1d(enrollment_probability(spec, pop.z))
    ids = np.arange(len(pop), dtype=np.uint64)
    return rng.bernoulli(prob, seed, "enroll", ids), prob


def draw_preround(spec: SelectionSpec, pop: Population, round_index: int, seed: int) -> np.ndarray:
    N, d_z = pop.z.shape
    d_x = spec.preround_dim
    ids, dims = rng.grid(N, d_x)
    x = rng.normal(seed, "preround", round_index, ids, dims)
    if spec.mix:
        M = np.eye(d_x, d_z)
        x = x + spec.mix * pop.z @ M.T
    return x


def draw_round(spec: SelectionSpec, pop: Population, enrolled, enroll_prob, round_index: int, seed: int):
    """Covariates and participation for one round (1-based index).

    Returns ``(x, participated, part_prob, inclusion)``.
    """
    x = draw_preround(spec, pop, round_index, seed)
    part_prob = np.atleast_1d(participation_probability(spec, pop.z, x))
    ids = np.arange(len(pop), dtype=np.uint64)
    participated = rng.bernoulli(part_prob, seed, "participate", round_index, ids)
    participated &= np.asarray(enrolled, dtype=bool)
    return x, participated, part_prob, np.asarray(enroll_prob) * part_prob


def simulate_selection(spec: SelectionSpec, pop: Population, rounds: int, seed: int) -> SelectionTrace:
    spec.validate(pop.z.shape[1])
    enrolled, enroll_prob = draw_enrollment(spec, pop, seed)
    per_round = [draw_round(spec, pop, enrolled, enroll_prob, r, seed) for r in range(1, rounds + 1)]
    N = len(pop)
    if per_round:
        x, a, pp, incl = (np.stack(col) for col in zip(*per_round))
    else:
        x = np.zeros((0, N, spec.preround_dim))
        a = np.zeros((0, N), bool)
        pp = incl = np.zeros((0, N))
    return SelectionTrace(enrolled, enroll_prob, x, a, pp, incl)


def write_trace_csv(trace: SelectionTrace, path) -> None:
    """Audit CSV with one row per (round, client)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "round", "E", "A", "pi_enroll", "pi_part", "p_true"])
        for r in range(trace.rounds):
            for i in range(trace.enrolled.shape[0]):
                w.writerow([
                    i,
                    r + 1,
                    int(trace.enrolled[i]),
                    int(trace.participated[r, i]),
                    repr(float(trace.enroll_prob[i])),
                    repr(float(trace.part_prob[r, i])),
                    repr(float(trace.inclusion[r, i])),
                ])
