"""Command-line entry point: ``stad <stage> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from .config import ConfigError, PipelineConfig, load_config
from .pipeline import STAGES, DependencyError, Pipeline, default_run_dir, RUNS_ENV

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="flat key = value config file; flags below override it")
    g.add_argument("--run-dir", help=f"run directory (default: ${RUNS_ENV}/<name>, or runs/<name>)")
    g.add_argument("--name", default="run", help="run name under the runs root (default: run)")
    g.add_argument("--workers", type=int, default=1, help="cap on parallel worker processes")
    g.add_argument("--force", action="store_true", help="rerun stages even when their inputs are unchanged")
    g.add_argument("-v", "--verbose", action="store_true")
    o = common.add_argument_group("config overrides")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        o.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.type.upper(), default=None,
                       help=f"(default: {f.default})")

    parser = _Parser(prog="stad", description="Difference-image world-model driving pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(STAGES + ("all",)) + "}")
    for name in STAGES + ("all",):
        helptext = "run every stage in order" if name == "all" else f"run the {name} stage"
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("stad: a subcommand is required (try `stad --help`)")
        if args.workers < 1:
            raise UsageError("stad: --workers must be >= 1")
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        config = load_config(args.config, overrides)
    except (UsageError, ConfigError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exit_:  # --help
        return EXIT_OK if exit_.code in (0, None) else EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    run_dir = args.run_dir or default_run_dir(args.name)
    pipeline = Pipeline(config, run_dir, workers=args.workers, force=args.force)
    try:
        results = pipeline.run_all() if args.command == "all" else [pipeline.run_stage(args.command)]
    except DependencyError as err:
        print(f"dependency error: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as err:  # noqa: BLE001 - any stage failure maps to one exit code
        logging.getLogger("stad").debug("stage failed", exc_info=True)
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    for r in results:
        status = "skipped (up to date)" if r.skipped else f"done in {r.manifest['wall_clock_seconds']:.1f}s"
        print(f"{r.stage}: {status}")
    print(f"run directory: {pipeline.run_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
