"""Self-checks of the closed forms and solvers, collected into one report.

Library functions are looked up through their modules at call time, so a
replaced implementation is what gets checked.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import null_space

from . import calibration, rng, synthgen, theory
from .config import ExperimentConfig

GRID_MU = (0.5, 1.0, 2.0)
GRID_A = (0.5, 1.0, 2.0)
GRID_EPS = (0.1, 0.25, 0.5)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{status} {c.name}: value={c.value:.3e} tol={c.tolerance:.1e} {c.detail}".rstrip())
        lines.append(f"{sum(c.passed for c in self.checks)}/{len(self.checks)} checks passed")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "passed", "value", "tolerance", "detail"])
            for c in self.checks:
                w.writerow([c.name, int(c.passed), repr(float(c.value)), repr(float(c.tolerance)), c.detail])


def _argmin_1d(f, x0: float = 0.0, h: float = 1e-3, iters: int = 50) -> float:
    """Newton iteration with central-difference derivatives."""
    x = float(x0)
    for _ in range(iters):
        fp, f0, fm = f(x + h), f(x), f(x - h)
        d1 = (fp - fm) / (2 * h)
        d2 = (fp - 2 * f0 + fm) / h**2
        if d2 <= 0:
            raise ArithmeticError("nonconvex direction in 1-D search")
        step = d1 / d2
        x -= step
        if abs(step) < 1e-15 * max(1.0, abs(x)):
            break
    return x


# --- individual checks ------------------------------------------------------


def check_oracle_unbiased(gen: np.random.Generator, instances: int = 50, max_n: int = 10):
    worst = 0.0
    for _ in range(instances):
        n = int(gen.integers(1, max_n + 1))
        deltas = gen.normal(size=n)
        p = gen.uniform(0.05, 1.0, size=n)
        est = theory.enumerate_ipw_expectation(deltas, p, "oracle")
        worst = max(worst, abs(est - deltas.mean()))
    return worst, 1e-12, worst <= 1e-12, f"{instances} instances, n <= {max_n}"


def check_naive_biased(gen=None):
    deltas = np.array([1.0, 2.0, 3.0])
    p = np.array([0.9, 0.5, 0.1])
    est = theory.enumerate_ipw_expectation(deltas, p, "naive", condition_nonempty=True)
    gap = abs(est - deltas.mean())
    return gap, 0.05, gap > 0.05, f"naive expectation {est:.6f} vs mean 2"


def _two_client_grid():
    for mu in GRID_MU:
        for a in GRID_A:
            for eps in GRID_EPS:
                yield theory.TwoClientInstance(mu, a, eps)


def check_two_client_minimizer(gen=None):
    worst = 0.0
    for inst in _two_client_grid():
        numeric = _argmin_1d(inst.weighted_objective)
        worst = max(worst, abs(theory.two_client_minimizer(inst) - numeric))
    return worst, 1e-10, worst <= 1e-10, "27-point (mu, a, eps) grid"


def check_two_client_gap(gen=None):
    worst = 0.0
    for inst in _two_client_grid():
        t_rho = _argmin_1d(inst.weighted_objective)
        t_star = _argmin_1d(inst.objective)
        numeric = inst.objective(t_rho) - inst.objective(t_star)
        worst = max(worst, abs(theory.two_client_gap(inst) - numeric))
    return worst, 1e-10, worst <= 1e-10, "27-point (mu, a, eps) grid"


def check_gap_lower_bound(gen=None):
    margin = min(
        theory.two_client_gap(inst) - inst.eps_w**2 * inst.G2 / (8 * inst.mu) for inst in _two_client_grid()
    )
    return margin, 0.0, margin >= 0.0, "min of gap - eps^2 G^2 / (8 mu)"


def _floor_constants(**kw):
    base = dict(L=1.0, mu=0.5, G=1.0, eta_tilde=0.005, h0=1.0, B=1.0, sigma2=1.0, p_min=0.2, K=5, gamma=1.0, N=100)
    base.update(kw)
    return theory.TheoryConstants(**base)


def check_floor_zero(gen=None):
    floor = theory.bias_floor_terms(_floor_constants(eps_w=0.0), 100)["floor"]
    return abs(floor), 0.0, floor == 0.0, "floor term with exact weights"


def check_floor_monotone(gen=None):
    eps = np.linspace(0.0, 0.5, 11)
    h0 = np.linspace(0.0, 5.0, 11)
    by_eps = [theory.bias_floor_rhs(_floor_constants(eps_w=e), 200) for e in eps]
    by_h0 = [theory.bias_floor_rhs(_floor_constants(eps_w=0.2, h0=h), 200) for h in h0]
    worst = min(np.min(np.diff(by_eps)), np.min(np.diff(by_h0)))
    return float(worst), 0.0, worst >= 0.0, "min increment along eps_w and h0"


def check_participation_only_residual(gen: np.random.Generator):
    enroll = gen.uniform(0.1, 1.0, size=20)
    part = gen.uniform(0.1, 1.0, size=20)
    rho, eps = theory.residual_weight_error(enroll * part, part)
    err = max(float(np.max(np.abs(rho - enroll))), abs(eps - float(np.max(np.abs(enroll - 1)))))
    _, eps_example = theory.residual_weight_error([0.6 * 0.5], [0.5])
    err = max(err, abs(eps_example - 0.4))
    return err, 1e-12, err <= 1e-12, "rho equals the enrollment probability"


def check_two_client_training(gen=None):
    inst = theory.TwoClientInstance(1.0, 1.0, 0.5)
    target = theory.two_client_minimizer(inst)
    ro = theory.expected_two_client_training(inst, "round_only_ipw")[-1]
    fi = theory.expected_two_client_training(inst, "fedipw")[-1]
    orc = theory.expected_two_client_training(inst, "oracle_ipw")[-1]
    worst = max(abs(ro - target), abs(fi), abs(orc))
    return worst, 1e-3, worst <= 1e-3, f"round-only {ro:.6f} (target {target}), fedipw {fi:.2e}, oracle {orc:.2e}"


def check_empirical_floor(gen=None):
    """Round-only training at a step inside the admissible range stays under the bound."""
    inst = theory.TwoClientInstance(1.0, 1.0, 0.5)
    part = np.array([0.6, 0.3])
    p_true = inst.rho / 2 * part
    _, eps_w = theory.residual_weight_error(p_true, part)
    probe = theory.TheoryConstants(L=inst.L, mu=inst.mu, G=np.sqrt(inst.G2), eta_tilde=0.0, h0=0.0, p_min=float(p_true.min()), N=2)
    K = 5
    eta = 0.99 * probe.max_step / K
    theta0 = 1.0
    rounds = 6000
    thetas = theory.expected_two_client_training(
        inst, "round_only_ipw", part, rounds=rounds, local_steps=K, local_step_size=eta, theta0=theta0
    )
    f_star = inst.objective(0.0)
    gap = inst.objective(thetas[-1]) - f_star
    c = replace(probe, eta_tilde=K * eta, h0=inst.objective(theta0) - f_star, eps_w=eps_w, K=K)
    rhs = theory.bias_floor_rhs(c, rounds)
    lower = inst.eps_w**2 * inst.G2 / (8 * inst.mu)
    ok = lower <= gap <= rhs
    return gap, rhs, ok, f"gap {gap:.4g} within [{lower:.4g}, {rhs:.4g}]"


def _random_feasible_instance(gen, n, q_dim):
    b = gen.normal(size=(n, q_dim))
    w = gen.dirichlet(np.ones(n))
    return b, w @ b


def check_calibration_constraints(gen: np.random.Generator, instances: int = 100):
    worst_sum = worst_mom = 0.0
    worst_neg = 0.0
    for _ in range(instances):
        q_dim = int(gen.integers(1, 4))
        n = int(gen.integers(q_dim + 1, 51))
        b, mu = _random_feasible_instance(gen, n, q_dim)
        w = calibration.solve_calibration_weights(b, mu).weights
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        worst_mom = max(worst_mom, float(np.max(np.abs(w @ b - mu))))
        worst_neg = min(worst_neg, float(w.min()))
    ok = worst_sum <= 1e-10 and worst_mom <= 1e-8 and worst_neg >= 0.0
    return max(worst_sum, worst_mom), 1e-8, ok, f"sum {worst_sum:.1e}, moments {worst_mom:.1e}, min q {worst_neg:.1e}"


def brute_force_calibration(b, mu, points: int = 401):
    """Best objective over a grid of the feasible set (affine slice of the simplex)."""
    b = np.atleast_2d(np.asarray(b, float))
    n = b.shape[0]
    A = np.vstack([np.ones(n), b.T])
    c = np.r_[1.0, mu]
    q0 = np.linalg.lstsq(A, c, rcond=None)[0]
    Z = null_space(A)
    if Z.shape[1] == 0:
        cands = q0[None, :]
    else:
        axis = np.linspace(-1.5, 1.5, points)
        t = np.stack(np.meshgrid(*[axis] * Z.shape[1], indexing="ij"), -1).reshape(-1, Z.shape[1])
        cands = q0 + t @ Z.T
    cands = cands[np.all(cands >= -1e-12, axis=1)]
    if cands.size == 0:
        return np.inf
    return float(np.min(np.sum((cands - 1.0 / n) ** 2, axis=1)))


def check_calibration_optimality(gen: np.random.Generator, instances: int = 30):
    worst = -np.inf
    for _ in range(instances):
        n = int(gen.integers(2, 5))
        q_dim = int(gen.integers(1, min(n - 1, 2) + 1))
        b, mu = _random_feasible_instance(gen, n, q_dim)
        w = calibration.solve_calibration_weights(b, mu).weights
        ours = float(np.sum((w - 1.0 / n) ** 2))
        worst = max(worst, ours - brute_force_calibration(b, mu))
    return worst, 1e-6, worst <= 1e-6, "solver objective minus grid optimum, n <= 4"


def check_calibrated_update_unbiased(gen: np.random.Generator, instances: int = 20):
    worst = 0.0
    for _ in range(instances):
        n = int(gen.integers(3, 11))
        b, mu = _random_feasible_instance(gen, n, 1)
        q = calibration.solve_calibration_weights(b, mu).weights
        part = gen.uniform(0.05, 1.0, size=n)
        deltas = gen.normal(size=(n, 2))
        est = theory.enumerate_ipw_expectation(deltas, part, q / part)
        worst = max(worst, float(np.max(np.abs(est - q @ deltas))))
    return worst, 1e-12, worst <= 1e-12, "expected calibrated update equals sum q delta"


def _small_population(config: ExperimentConfig, clients: int = 10):
    spec = replace(config.population, num_clients=clients, master_seed=rng.derive_seed(config.seed, "verify-pop"))
    return synthgen.generate_population(spec), spec.ridge


def check_gradients(gen: np.random.Generator, config: ExperimentConfig, points: int = 20):
    pop, lam = _small_population(config)
    m = pop.feature_dim
    h = 1e-5
    worst = 0.0
    for _ in range(points):
        theta = gen.normal(size=m)
        for client in pop:
            g = synthgen.client_gradient(client, theta, lam)
            fd = np.array([
                (synthgen.client_loss(client, theta + h * e, lam) - synthgen.client_loss(client, theta - h * e, lam)) / (2 * h)
                for e in np.eye(m)
            ])
            worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst, 1e-6, worst < 1e-6, f"{points} points x {len(pop)} clients"


def check_newton(gen, config: ExperimentConfig):
    spec = replace(config.population, master_seed=rng.derive_seed(config.seed, "verify-pop"))
    pop = synthgen.generate_population(spec)
    sol = synthgen.solve_target_optimum(pop, spec.ridge)
    g = float(np.linalg.norm(synthgen.population_gradient(pop, sol.theta_star, spec.ridge)))
    return g, 1e-10, g < 1e-10, f"{sol.iterations} Newton iterations"


CHECKS = (
    ("oracle_ipw_enumeration_unbiased", check_oracle_unbiased),
    ("naive_enumeration_biased", check_naive_biased),
    ("two_client_minimizer", check_two_client_minimizer),
    ("two_client_gap", check_two_client_gap),
    ("two_client_gap_lower_bound", check_gap_lower_bound),
    ("bias_floor_zero_for_exact_weights", check_floor_zero),
    ("bias_floor_monotone", check_floor_monotone),
    ("participation_only_residual", check_participation_only_residual),
    ("two_client_training_limits", check_two_client_training),
    ("two_client_empirical_floor", check_empirical_floor),
    ("calibration_constraints", check_calibration_constraints),
    ("calibration_optimality", check_calibration_optimality),
    ("calibrated_update_unbiased", check_calibrated_update_unbiased),
    ("gradient_finite_differences", check_gradients),
    ("newton_stationarity", check_newton),
)


def run_verification_suite(config: ExperimentConfig | None = None) -> VerificationReport:
    """Run every check once; a check that raises is reported as failed."""
    config = config or ExperimentConfig()
    report = VerificationReport()
    for name, fn in CHECKS:
        gen = np.random.default_rng(rng.derive_seed(config.seed, "verify", rng.tag_id(name)))
        start = time.perf_counter()
        try:
            if fn in (check_gradients, check_newton):
                value, tol, ok, detail = fn(gen, config)
            else:
                value, tol, ok, detail = fn(gen)
        except Exception as exc:  # reported, not raised: the suite enumerates failures
            value, tol, ok, detail = float("nan"), float("nan"), False, f"{type(exc).__name__}: {exc}"
        report.checks.append(CheckResult(name, bool(ok), float(value), float(tol), detail, time.perf_counter() - start))
    return report
