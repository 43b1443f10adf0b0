#!/usr/bin/env python3
"""
gradflux command line

Runs heat, chemotaxis, sweep, verification and report experiments from a YAML
configuration and writes a run archive.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 solver failure,
4 checker failure under --strict.
"""

import argparse
import os
import sys
from pathlib import Path

from dotenv import load_dotenv
from simple_error_log.errors import Errors

from cli_io import (
    SOLVER_ERRORS,
    ConfigError,
    default_output_dir,
    emit_reports,
    format_summary_json,
    format_summary_text,
    load_archive,
    load_config,
    retarget,
    run_experiment,
)

load_dotenv()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_STRICT = 4


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(
        prog="gradflux",
        description="Numerical verification lab for gradient estimates of heat and chemotaxis problems",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    python gradflux.py heat --config examples_config/heat_constant.yaml
    python gradflux.py verify --config examples_config/heat_cosine.yaml --strict
    python gradflux.py sweep --config examples_config/sweep_spike.yaml --threads 4 --out runs/spike
    python gradflux.py chemo --config examples_config/chemo_a.yaml
    python gradflux.py report runs/spike -f json

Note: GRADFLUX_THREADS and GRADFLUX_OUT (environment or .env) supply defaults
for --threads and --out.
        """,
    )
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)
    for name, text in (
        ("heat", "Solve a heat problem and run the a-priori checks"),
        ("chemo", "Solve a chemotaxis system and run its checkers"),
        ("sweep", "Run an eps-ladder and report Cauchy ladders"),
        ("verify", "Run the full checker battery on the configured problem"),
    ):
        sub = subparsers.add_parser(name, help=text, description=text)
        sub.add_argument("-c", "--config", required=True, help="Path to the YAML configuration file")
        sub.add_argument("-o", "--out", default=None, help="Archive directory (default: GRADFLUX_OUT or config output)")
        sub.add_argument(
            "-t", "--threads", type=int, default=None, help="Worker threads for sweeps (default: GRADFLUX_THREADS or 1)"
        )
        sub.add_argument("--strict", action="store_true", help="Exit with code 4 when any checker fails")
        sub.add_argument("-f", "--format", choices=["text", "json"], default="text", help="Summary format")
    report = subparsers.add_parser("report", help="Re-emit the summary of an existing archive")
    report.add_argument("archive", help="Path to a run archive directory")
    report.add_argument("--strict", action="store_true", help="Exit with code 4 when the archive has failures")
    report.add_argument("-f", "--format", choices=["text", "json"], default="text", help="Summary format")
    return parser


def _threads(value: int | None) -> int:
    if value is None:
        value = int(os.environ.get("GRADFLUX_THREADS", "1"))
    if value < 1:
        raise ConfigError([("threads", f"must be at least 1, got {value}")])
    return value


def main(argv: list[str] | None = None) -> int:
    """Main entry point for the gradflux utility."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    errors = Errors()
    try:
        if args.command == "report":
            print(f"Loading archive: {args.archive}")
            archive = load_archive(args.archive)
            emit_reports(archive, errors)
        else:
            print(f"Loading configuration: {args.config}")
            config = retarget(load_config(args.config), args.command)
            out = args.out or default_output_dir() or config.output
            threads = _threads(args.threads)
            print(f"Running {args.command} experiment, archive: {out}")
            archive = run_experiment(config, Path(out), threads, errors)
    except SOLVER_ERRORS as e:
        print(f"Solver failure: {e}", file=sys.stderr)
        if errors.error_count() > 0:
            print(f"Errors: {errors.dump(0)}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, FileNotFoundError) as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.format == "json":
        print(format_summary_json(archive))
    else:
        print(format_summary_text(archive, errors))
    print(f"Saved to: {archive.path}")

    unsettled = [r for r in archive.ladders if r.verdict != "cauchy-decreasing"]
    if args.strict and archive.failed:
        print(f"Strict mode: {len(archive.failed)} checker(s) failed", file=sys.stderr)
        return EXIT_STRICT
    if unsettled:
        print(f"{len(unsettled)} ladder(s) not converging: {', '.join(r.name for r in unsettled)}")
    print("Done!")
    return EXIT_OK


if __name__ == "__main__":
    exit(main())
