"""Command-line entry point: ``evodarcy <command> --config run.toml --out DIR``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, EvoDarcyError
from . import config as config_mod
from .pipelines import COMMANDS, EXIT_CONFIG, EXIT_SOLVER, Run

log = logging.getLogger("evodarcy")


def build_parser():
    p = argparse.ArgumentParser(prog="evodarcy", description="Evolving-microstructure Darcy toolkit.")
    p.add_argument("command", choices=tuple(COMMANDS))
    p.add_argument("--config", required=True, metavar="PATH", help="TOML run configuration")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides run.out)")
    p.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads")
    p.add_argument("--log-level", default="INFO",
                   choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config, args.command)
        if args.threads < 1:
            raise ConfigError("must be at least 1", "--threads")
        out = args.out or cfg["run"]["out"] or f"evodarcy-{args.command}"
        cfg["run"]["out"] = str(out)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    run = Run(Path(out), args.threads)
    run.out.mkdir(parents=True, exist_ok=True)
    run.path("config.toml").write_text(config_mod.dumps(cfg))
    try:
        code = COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        code = EXIT_CONFIG
    except EvoDarcyError as exc:
        log.error("%s failed: %s", args.command, exc)
        code = EXIT_SOLVER
    run.artifacts = [p for p in run.artifacts if p.exists()]
    run.write_manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
