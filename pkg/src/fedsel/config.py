"""Experiment configuration: INI-style ``key = value`` sections.

Every key has a documented default, unknown sections or keys are rejected,
and :func:`dump_config` writes the canonical form that :func:`load_config`
reads back unchanged.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

from .calibration import CalibrationSpec
from .errors import ConfigurationError
from .federation import METHODS, TrainingConfig
from .propensity import PropensityConfig
from .selection import SelectionSpec
from .synthgen import PopulationSpec

SEED_ENV = "FEDSEL_SEED"
DEFAULT_SEED = 20240611


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationSpec = PopulationSpec()
    selection: SelectionSpec = SelectionSpec()
    training: TrainingConfig = TrainingConfig()
    propensity: PropensityConfig = PropensityConfig()
    calibration: CalibrationSpec = CalibrationSpec()
    methods: tuple[str, ...] = ("naive", "round_only_ipw", "fedipw", "oracle_ipw")
    sweep_param: str | None = None
    sweep_values: tuple[float, ...] = ()
    replications: int = 10
    seed: int = DEFAULT_SEED
    output_dir: str = "results"


# --- value codecs -----------------------------------------------------------


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _parse_float(s: str) -> float:
    return float(s)


def _parse_int(s: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", s):
        raise ValueError(f"not an integer: {s!r}")
    return int(s)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    s = s.strip()
    return tuple(float(v) for v in s.split(",")) if s else ()


def _fmt_floats(v) -> str:
    return ", ".join(_fmt_float(x) for x in v)


def _parse_matrix(s: str) -> tuple[tuple[float, ...], ...]:
    rows = [r for r in (part.strip() for part in s.split(";")) if r]
    return tuple(_parse_floats(r) for r in rows)


def _fmt_matrix(v) -> str:
    return "; ".join(_fmt_floats(r) for r in v)


def _optional(parse: Callable[[str], Any]):
    return lambda s: None if s.lower() == "none" else parse(s)


def _fmt_optional(fmt: Callable[[Any], str]):
    return lambda v: "none" if v is None else fmt(v)


def _parse_batch(s: str):
    return None if s.lower() == "full" else _parse_int(s)


def _choice(*options: str):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    return parse


def _parse_methods(s: str) -> tuple[str, ...]:
    out = tuple(m.strip() for m in s.split(",") if m.strip())
    bad = [m for m in out if m not in METHODS]
    if bad:
        raise ValueError(f"unknown method(s) {', '.join(bad)}")
    return out


_INT = (_parse_int, str)
_FLOAT = (_parse_float, _fmt_float)
_FLOATS = (_parse_floats, _fmt_floats)
_BOOL = (_parse_bool, lambda b: "true" if b else "false")

# section -> key -> (dataclass attribute, parse, format)
SCHEMA: dict[str, dict[str, tuple[str, Callable, Callable]]] = {
    "population": {
        "num_clients": ("num_clients", *_INT),
        "covariate_dim": ("covariate_dim", *_INT),
        "feature_dim": ("feature_dim", *_INT),
        "samples_per_client": ("samples_per_client", *_INT),
        "base_param": ("base_param", *_FLOATS),
        "heterogeneity": ("heterogeneity", _parse_matrix, _fmt_matrix),
        "ridge": ("ridge", *_FLOAT),
    },
    "selection": {
        "enroll_intercept": ("enroll_intercept", *_FLOAT),
        "enroll_coef": ("enroll_coef", *_FLOATS),
        "bias_scale": ("bias_scale", *_FLOAT),
        "part_intercept": ("part_intercept", *_FLOAT),
        "part_coef_z": ("part_coef_z", *_FLOATS),
        "part_coef_x": ("part_coef_x", *_FLOATS),
        "preround_dim": ("preround_dim", *_INT),
        "mix": ("mix", *_FLOAT),
    },
    "training": {
        "local_steps": ("local_steps", *_INT),
        "local_step_size": ("local_step_size", *_FLOAT),
        "server_step_size": ("server_step_size", *_FLOAT),
        "rounds": ("rounds", *_INT),
        "batch_size": ("batch_size", _parse_batch, lambda v: "full" if v is None else str(v)),
        "round_only_divisor": ("round_only_divisor", _choice("enrolled", "population"), str),
        "population_size": ("population_size", _optional(_parse_int), _fmt_optional(str)),
        "participation_source": ("participation_source", _choice("estimated", "true"), str),
        "hajek": ("hajek", *_BOOL),
    },
    "propensity": {
        "clip_floor": ("clip_floor", *_FLOAT),
        "ridge": ("ridge", *_FLOAT),
        "window": ("window", *_INT),
        "tol": ("tol", *_FLOAT),
        "max_iter": ("max_iter", *_INT),
    },
    "calibration": {
        "balance_map": ("balance_map", _choice("identity", "identity+bins"), str),
        "bins": ("bins", *_INT),
        "target_moments": ("target_moments", _optional(_parse_floats), _fmt_optional(_fmt_floats)),
        "moment_noise_sigma": ("moment_noise_sigma", *_FLOAT),
    },
    "experiment": {
        "methods": ("methods", _parse_methods, ", ".join),
        "sweep_param": ("sweep_param", _optional(str), _fmt_optional(str)),
        "sweep_values": ("sweep_values", *_FLOATS),
        "replications": ("replications", *_INT),
        "seed": ("seed", *_INT),
        "output_dir": ("output_dir", str, str),
    },
}

# dimensions fix the lengths of other entries, so they cannot be swept alone
_STRUCTURAL = {"population.covariate_dim", "population.feature_dim", "selection.preround_dim"}

# parameters that a sweep may vary, as "section.key"
SWEEPABLE = {
    f"{sec}.{key}"
    for sec, keys in SCHEMA.items()
    if sec != "experiment"
    for key, (_, parse, _f) in keys.items()
    if parse in (_parse_float, _parse_int)
} - _STRUCTURAL


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    where: dict[tuple[str, str], int] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = lineno
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", stripped)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), lineno)
    return where


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigurationError(f"{source}: parse error at line {line}: {exc.message.splitlines()[0]}", line=line) from None
    lines = _line_numbers(text)
    values: dict[str, dict[str, Any]] = {sec: {} for sec in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(
                f"{source}: unknown section [{section}] (line {lines.get((section, ''))})",
                key=section,
                line=lines.get((section, "")),
            )
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"{source}: unknown key {key!r} in [{section}] (line {line})", key=key, line=line)
            attr, parse, _ = SCHEMA[section][key]
            try:
                values[section][attr] = parse(raw.strip())
            except ValueError as exc:
                raise ConfigurationError(f"{source}: bad value for {section}.{key} (line {line}): {exc}", key=key, line=line) from None
    cfg = ExperimentConfig(
        population=replace(PopulationSpec(), **values["population"]),
        selection=replace(SelectionSpec(), **values["selection"]),
        training=replace(TrainingConfig(), **values["training"]),
        propensity=replace(PropensityConfig(), **values["propensity"]),
        calibration=replace(CalibrationSpec(), **values["calibration"]),
        **values["experiment"],
    )
    # the balance map acts on the population covariates
    cfg = replace(
        cfg, calibration=replace(cfg.calibration, covariate_dim=cfg.population.covariate_dim)
    )
    validate_config(cfg)
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Read and validate a config file; ``None`` gives the defaults.

    The ``FEDSEL_SEED`` environment variable, when set, overrides the seed.
    """
    if path is None:
        cfg = ExperimentConfig()
    else:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config(text, str(path))
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            cfg = replace(cfg, seed=_parse_int(env.strip()))
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer", key=SEED_ENV) from None
        validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    cfg.population.validate()
    if cfg.calibration.covariate_dim != cfg.population.covariate_dim:
        raise ConfigurationError("calibration covariate_dim must equal population covariate_dim", key="covariate_dim")
    cfg.selection.validate(cfg.population.covariate_dim)
    cfg.training.validate()
    p = cfg.propensity
    if not 0 < p.clip_floor < 0.5:
        raise ConfigurationError("clip_floor must lie in (0, 0.5)", key="clip_floor")
    if not p.ridge > 0:
        raise ConfigurationError("propensity ridge must be > 0", key="ridge")
    if p.window < 1 or p.max_iter < 1 or not p.tol > 0:
        raise ConfigurationError("window, max_iter and tol must be positive", key="window")
    c = cfg.calibration
    if c.bins < 1:
        raise ConfigurationError("bins must be >= 1", key="bins")
    if c.moment_noise_sigma < 0:
        raise ConfigurationError("moment_noise_sigma must be >= 0", key="moment_noise_sigma")
    if c.target_moments is not None:
        want = c.num_moments
        if len(c.target_moments) != want:
            raise ConfigurationError(f"target_moments needs {want} values", key="target_moments")
    if cfg.replications < 1:
        raise ConfigurationError("replications must be >= 1", key="replications")
    if not cfg.methods:
        raise ConfigurationError("at least one method is required", key="methods")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigurationError("seed must fit in 64 unsigned bits", key="seed")
    if cfg.sweep_param is not None and cfg.sweep_param not in SWEEPABLE:
        raise ConfigurationError(f"unknown sweep parameter {cfg.sweep_param!r}", key="sweep_param")


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form of ``cfg``; every key is written."""
    objects = {
        "population": cfg.population,
        "selection": cfg.selection,
        "training": cfg.training,
        "propensity": cfg.propensity,
        "calibration": cfg.calibration,
        "experiment": cfg,
    }
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (attr, _, fmt) in keys.items():
            out.append(f"{key} = {fmt(getattr(objects[section], attr))}".rstrip())
        out.append("")
    return "\n".join(out)


def normalize_config_text(text: str) -> str:
    return dump_config(parse_config(text))


def with_param(cfg: ExperimentConfig, name: str, value: float) -> ExperimentConfig:
    """Copy of ``cfg`` with the swept parameter ``section.key`` set to ``value``."""
    if name not in SWEEPABLE:
        raise ConfigurationError(f"unknown sweep parameter {name!r}", key=name)
    section, key = name.split(".")
    attr, parse, _ = SCHEMA[section][key]
    if parse is _parse_int:
        if float(value) != int(value):
            raise ConfigurationError(f"{name} needs an integer value", key=name)
        value = int(value)
    else:
        value = float(value)
    return replace(cfg, **{section: replace(getattr(cfg, section), **{attr: value})})
