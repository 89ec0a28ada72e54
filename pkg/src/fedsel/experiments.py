"""Replicated training experiments written as long-format CSV files.

Each replication ``k`` uses the seed ``derive_seed(master, "replication", k)``
for the population, the selection draws, minibatches and moment noise. All
methods at a sweep point share one selection trace and one set of propensity
fits, so method differences are paired.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng
from .calibration import write_diagnostics_csv, write_weights_csv
from .config import ExperimentConfig, with_param
from .errors import ConfigurationError
from .federation import EstimationConfig, run_training
from .propensity import estimate_propensity_path, write_fits_csv
from .selection import simulate_selection, write_trace_csv
from .synthgen import generate_population, heterogeneity_constant, solve_target_optimum

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "experiment",
    "replication",
    "sweep_value",
    "round",
    "method",
    "target_loss",
    "dist_to_opt",
    "eps_w_logged",
    "participants",
    "mean_weight",
)
SUMMARY_FIELDS = (
    "experiment",
    "replication",
    "sweep_value",
    "method",
    "final_target_loss",
    "f_star",
    "excess_loss",
    "final_dist_to_opt",
    "final_eps_w",
    "G",
    "skipped_rounds",
    "calibration_slack",
)
STATS_FIELDS = (
    "experiment",
    "sweep_value",
    "method",
    "replications",
    "mean_final_target_loss",
    "sd_final_target_loss",
    "mean_final_dist_to_opt",
    "sd_final_dist_to_opt",
)


@dataclass(frozen=True)
class PanelDesign:
    methods: tuple[str, ...]
    sweep_param: str | None = None
    sweep_values: tuple[float, ...] = ()


PANELS = {
    "a": PanelDesign(("naive", "round_only_ipw", "fedipw", "oracle_ipw")),
    "b": PanelDesign(
        ("naive", "round_only_ipw", "fedipw", "oracle_ipw"),
        "selection.bias_scale",
        (0.0, 0.5, 1.0, 1.5, 2.0),
    ),
    "c": PanelDesign(("round_only_ipw", "calibrated", "fedipw")),
    "d": PanelDesign(
        ("round_only_ipw", "calibrated"),
        "calibration.moment_noise_sigma",
        (0.0, 0.1, 0.3, 1.0),
    ),
}


@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    replication: int
    sweep_value: float | None
    round: int
    method: str
    target_loss: float
    dist_to_opt: float
    eps_w_logged: float
    participants: int
    mean_weight: float


@dataclass(frozen=True)
class SummaryRow:
    experiment: str
    replication: int
    sweep_value: float | None
    method: str
    final_target_loss: float
    f_star: float
    excess_loss: float
    final_dist_to_opt: float
    final_eps_w: float
    G: float
    skipped_rounds: int
    calibration_slack: float


@dataclass
class ExperimentResult:
    experiment: str
    rows: list[MetricsRow] = field(default_factory=list)
    summary: list[SummaryRow] = field(default_factory=list)
    files: dict[str, Path] = field(default_factory=dict)

    def final(self, method: str, sweep_value: float | None = None, metric: str = "final_target_loss") -> np.ndarray:
        """Per-replication final metric for one method and sweep point, ordered by replication."""
        vals = [
            (s.replication, getattr(s, metric))
            for s in self.summary
            if s.method == method and s.sweep_value == sweep_value
        ]
        return np.array([v for _, v in sorted(vals)])


def replication_seed(master: int, k: int) -> int:
    return rng.derive_seed(master, "replication", k)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path: Path, header, records) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            w.writerow([_cell(getattr(rec, f)) for f in header])


def _stats(result: ExperimentResult):
    keys = []
    for s in result.summary:
        if (s.sweep_value, s.method) not in keys:
            keys.append((s.sweep_value, s.method))
    out = []
    for v, m in keys:
        loss = result.final(m, v)
        dist = result.final(m, v, "final_dist_to_opt")
        ddof = 1 if loss.size > 1 else 0
        out.append({
            "experiment": result.experiment,
            "sweep_value": v,
            "method": m,
            "replications": loss.size,
            "mean_final_target_loss": float(loss.mean()),
            "sd_final_target_loss": float(loss.std(ddof=ddof)),
            "mean_final_dist_to_opt": float(dist.mean()),
            "sd_final_dist_to_opt": float(dist.std(ddof=ddof)),
        })
    return out


def run_experiment(
    config: ExperimentConfig,
    experiment: str,
    methods,
    sweep_param: str | None = None,
    sweep_values=(),
    out_dir=None,
    audit: bool = False,
) -> ExperimentResult:
    """Run ``methods`` over replications and sweep points; write CSVs when ``out_dir`` is set.

    Files: ``<experiment>_metrics.csv`` (one row per replication, sweep
    value, round and method), ``<experiment>_summary.csv`` (final values per
    run) and ``<experiment>_stats.csv`` (mean and SD over replications).
    With ``audit`` the selection trace, propensity fits and calibration
    weights of replication 0 are written too.
    """
    values = [None] if sweep_param is None else [float(v) for v in sweep_values]
    if sweep_param is not None and not values:
        raise ConfigurationError("a sweep needs at least one value", key="sweep_values")
    methods = tuple(methods)
    result = ExperimentResult(experiment)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for k in range(config.replications):
        seed = replication_seed(config.seed, k)
        pops, traces, paths = {}, {}, {}
        for v in values:
            cfg = config if v is None else with_param(config, sweep_param, v)
            pop_spec = replace(cfg.population, master_seed=seed)
            if pop_spec not in pops:
                pop = generate_population(pop_spec)
                oracle = solve_target_optimum(pop, pop_spec.ridge)
                G = heterogeneity_constant(pop, oracle.theta_star, pop_spec.ridge)
                pops[pop_spec] = (pop, oracle, G)
            pop, oracle, G = pops[pop_spec]
            tkey = (pop_spec, cfg.selection, cfg.training.rounds)
            if tkey not in traces:
                traces[tkey] = simulate_selection(cfg.selection, pop, cfg.training.rounds, seed)
            trace = traces[tkey]
            estimation = EstimationConfig(
                cfg.propensity, replace(cfg.calibration, covariate_dim=pop_spec.covariate_dim)
            )
            pkey = (tkey, cfg.propensity)
            tag = "" if v is None else f"_{sweep_param}={v!r}"
            if audit and k == 0 and out is not None:
                write_trace_csv(trace, out / f"{experiment}{tag}_trace.csv")
            for method in methods:
                tcfg = replace(cfg.training, method=method, seed=seed)
                if pkey not in paths and method in ("fedipw", "round_only_ipw", "calibrated"):
                    paths[pkey] = estimate_propensity_path(pop, trace, cfg.propensity)
                res = run_training(
                    pop, cfg.selection, tcfg, oracle, estimation,
                    lam=pop_spec.ridge, trace=trace, path=paths.get(pkey),
                )
                for h in res.metrics:
                    result.rows.append(MetricsRow(
                        experiment, k, v, h["round"], method, h["target_loss"], h["dist_to_opt"],
                        h["max_rho_err"], h["participants"], h["mean_weight"],
                    ))
                last = res.metrics[-1]
                slack = res.calibration.slack_norm if res.calibration is not None else 0.0
                result.summary.append(SummaryRow(
                    experiment, k, v, method, last["target_loss"], oracle.f_star,
                    last["target_loss"] - oracle.f_star, last["dist_to_opt"], last["max_rho_err"],
                    G, len(res.skipped_rounds), slack,
                ))
                if audit and k == 0 and out is not None:
                    if pkey in paths:
                        write_fits_csv(paths[pkey], out / f"{experiment}{tag}_fits.csv")
                    if res.calibration is not None:
                        ids = np.flatnonzero(trace.enrolled)
                        write_weights_csv(res.calibration, ids, out / f"{experiment}{tag}_weights.csv")
                        write_diagnostics_csv(res.calibration, out / f"{experiment}{tag}_diagnostics.csv")
            log.info("%s replication %d sweep %s done", experiment, k, v)
    if out is not None:
        result.files["metrics"] = out / f"{experiment}_metrics.csv"
        result.files["summary"] = out / f"{experiment}_summary.csv"
        result.files["stats"] = out / f"{experiment}_stats.csv"
        _write(result.files["metrics"], METRIC_FIELDS, result.rows)
        _write(result.files["summary"], SUMMARY_FIELDS, result.summary)
        with result.files["stats"].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STATS_FIELDS)
            for row in _stats(result):
                w.writerow([_cell(row[f]) for f in STATS_FIELDS])
    return result


def run_panel(panel: str, config: ExperimentConfig, out_dir=None, audit: bool = False) -> ExperimentResult:
    """One panel of the selection-bias study.

    A: loss curves of naive, round-only, fedipw and oracle aggregation.
    B: the same methods across enrollment bias strengths.
    C: round-only IPW with and without calibration to exact moments, and fedipw.
    D: calibration with noisy target moments.
    A sweep in ``config`` over the panel's own axis replaces its default values.
    """
    key = panel.lower()
    if key not in PANELS:
        raise ConfigurationError(f"unknown panel {panel!r}; choose from a, b, c, d", key="panel")
    design = PANELS[key]
    values = design.sweep_values
    if design.sweep_param is not None and config.sweep_param == design.sweep_param and config.sweep_values:
        values = config.sweep_values
    return run_experiment(
        config, f"panel_{key}", design.methods, design.sweep_param, values, out_dir, audit
    )


def run_sweep(config: ExperimentConfig, param: str | None = None, values=None, out_dir=None) -> ExperimentResult:
    """Sweep ``param`` (``section.key``) over ``values`` for the configured methods."""
    param = param or config.sweep_param
    values = config.sweep_values if values is None else tuple(values)
    if param is None:
        raise ConfigurationError("no sweep parameter given", key="sweep_param")
    name = "sweep_" + param.replace(".", "_")
    return run_experiment(config, name, config.methods, param, values, out_dir)
