"""Command line entry point.

    facadescope <subcommand> --config path [--stage-dir path] [--workers N] [--seed N]

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 external
service error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from facadescope import pipeline
from facadescope._http import ServiceError
from facadescope.config import ConfigError, load_config
from facadescope.ingest import IngestError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SERVICE = 0, 1, 2, 3
SUBCOMMANDS = (*pipeline.STAGES, "run-all")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facadescope", description="Street-level building image pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "run-all" else "run every stage in order")
        s.add_argument("--config", required=True, help="YAML pipeline config")
        s.add_argument("--stage-dir", default=None, help="stage output root (default: paths.output_root)")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("-v", "--verbose", action="store_true")
    fx = sub.add_parser("make-fixture", help="write the synthetic mini fixture")
    fx.add_argument("directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "make-fixture":
        from facadescope.fixtures import build_mini_fixture

        build_mini_fixture(args.directory)
        return EXIT_OK

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        pipe = pipeline.Pipeline(cfg, args.stage_dir, args.workers)
        stages = pipeline.STAGES if args.command == "run-all" else (args.command,)
        for stage in stages:
            res = pipe.run(stage)
            state = "up to date" if res.skipped else "done"
            print(f"{stage}: {state} {res.manifest}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if "config" in str(exc).lower() or str(args.config) in str(exc) else EXIT_DATA
    except ServiceError as exc:
        print(f"error: external service: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (pipeline.StageMissing, pipeline.DataError, IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
