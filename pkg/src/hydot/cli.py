"""Command line entry point: ``hydot run|defaults|validate``."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import ConfigError, StageError, defaults_text, load_config, run, validate
from .krylov import ConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_FAILURE = 0, 2, 3, 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hydot", description="Hyperspectral DOT experiments at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a config file")
    r.add_argument("config")
    r.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub.add_parser("defaults", help="print every option with its default value")
    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(defaults_text())
        return EXIT_OK
    try:
        cfg = validate(load_config(args.config))
    except ConfigError as exc:
        print(f"hydot: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"{args.config}: ok ({cfg.run.kind})")
        return EXIT_OK
    level = logging.WARNING if args.quiet else getattr(logging, cfg.run.log_level.upper())
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        files = run(cfg)
    except ConfigError as exc:
        print(f"hydot: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"hydot: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE if isinstance(exc.original, ConvergenceError) else EXIT_FAILURE
    for name, path in sorted(files.items()):
        print(f"{name}\t{path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
