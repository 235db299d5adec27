"""``adunet`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, MissingArtifactError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3

COMMANDS = ("generate", "train-recon", "gen-anomalies", "train-seg", "evaluate", "render", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adunet", description="Anomaly-driven U-Net experiments on phantoms")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config (JSON)")
        p.add_argument("--force", action="store_true", help="re-run stages already marked complete")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--profile", choices=("smoke", "desk", "full"), default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-recon":
            p.add_argument("--backend", default=None)
            p.add_argument("--modality", default=None)
        if name == "train-seg":
            p.add_argument("--variant", default=None)
        if name == "render":
            p.add_argument("--case", action="append", dest="cases", default=None)
    return parser


def run(args) -> None:
    config = load_config(args.config, {"seed": args.seed, "profile": args.profile})
    f = args.force
    if args.command == "generate":
        pipeline.cmd_generate(config, f)
    elif args.command == "train-recon":
        pipeline.cmd_train_recon(config, args.backend, args.modality, f)
    elif args.command == "gen-anomalies":
        pipeline.cmd_gen_anomalies(config, f)
    elif args.command == "train-seg":
        pipeline.cmd_train_seg(config, args.variant, f)
    elif args.command == "evaluate":
        pipeline.cmd_evaluate(config, f)
    elif args.command == "render":
        pipeline.cmd_render(config, args.cases, f)
    elif args.command == "all":
        pipeline.cmd_generate(config, f)
        pipeline.cmd_train_recon(config, force=f)
        pipeline.cmd_gen_anomalies(config, f)
        pipeline.cmd_train_seg(config, force=f)
        pipeline.cmd_evaluate(config, f)
        pipeline.cmd_render(config, None, f)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
