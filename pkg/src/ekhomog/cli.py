"""Command line entry point ``ekhomog``.

Every pipeline stage is a subcommand; ``run`` executes all of them.  Exit
codes: 0 success, 2 configuration error, 3 solver failure, 4 verification
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import parse_config
from .errors import ConfigError, ConfigMismatch, EkError, NoConvergence, StageFailure
from .pipeline import STAGES, Layout, run_pipeline, verify, write_report, write_verify

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run configuration")
    common.add_argument("--out", help="output directory (default: output.dir from the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--seed-offset", type=int, default=0,
                        help="added to ensemble.base_seed for every realisation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ekhomog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage")
    v = sub.add_parser("verify", parents=[common], help="check invariants of existing artifacts")
    v.add_argument("--stages", default=",".join(STAGES),
                   help="comma separated stages to check; empty string checks nothing")
    sub.add_parser("report", parents=[common], help="write a tidy CSV of all results")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EkError as exc:  # validation of physical parameters
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output["dir"]

    if args.command == "verify":
        stages = [s for s in args.stages.split(",") if s.strip()]
        try:
            report = verify(cfg, [s.strip() for s in stages], out, args.seed_offset)
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        Layout(out).out.mkdir(parents=True, exist_ok=True)
        write_verify(report, Layout(out).verify)
        for c in report["checks"]:
            print(f"{'PASS' if c['pass'] else 'FAIL'} {c['check']} {c['value']}")
        return EXIT_OK if report["pass"] else EXIT_VERIFY

    if args.command == "report":
        try:
            path = write_report(cfg, out, args.seed_offset)
        except ConfigMismatch as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VERIFY
        print(path)
        return EXIT_OK

    stages = STAGES if args.command == "run" else (args.command,)
    try:
        man = run_pipeline(cfg, stages, out, args.jobs, args.seed_offset)
    except ConfigMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (StageFailure, NoConvergence) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if report is not None:
            print(json.dumps(report if isinstance(report, dict) else report.as_dict()), file=sys.stderr)
        return EXIT_SOLVER
    except EkError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps(man.stages))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
