"""Command line: ``fedsel run|verify|sweep``.

Exit status is 0 on success, 1 when a verification check fails and 2 for
configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigurationError
from .experiments import run_panel, run_sweep
from .verification import run_verification_suite

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2


def _values(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsel", description="Federated learning under two-stage client selection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one panel experiment")
    run.add_argument("--panel", required=True, choices=["a", "b", "c", "d"])
    run.add_argument("--config", help="config file (defaults when omitted)")
    run.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    run.add_argument("--audit", action="store_true", help="also write trace, fit and weight CSVs")

    verify = sub.add_parser("verify", help="run the verification suite")
    verify.add_argument("--config", help="config file (defaults when omitted)")
    verify.add_argument("--out", help="write verification.csv to this directory")

    sweep = sub.add_parser("sweep", help="sweep one parameter for the configured methods")
    sweep.add_argument("--param", required=True, help="parameter as section.key, e.g. selection.bias_scale")
    sweep.add_argument("--values", required=True, type=_values, help="comma-separated values")
    sweep.add_argument("--config", help="config file (defaults when omitted)")
    sweep.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.command == "verify":
            report = run_verification_suite(config)
            print(report.to_text())
            if args.out:
                from pathlib import Path

                Path(args.out).mkdir(parents=True, exist_ok=True)
                report.write_csv(Path(args.out) / "verification.csv")
            return EXIT_OK if report.passed else EXIT_CHECK_FAILED
        out = args.out or config.output_dir
        if args.command == "run":
            result = run_panel(args.panel, config, out, audit=args.audit)
        else:
            result = run_sweep(config, args.param, args.values, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for kind, path in result.files.items():
        print(f"{kind}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
