"""Command-line interface.

Subcommands mirror the pipeline stages: generate-data,
train-surrogate, run, diagnose.  Progress goes to stdout via logging;
on failure a single machine-readable JSON line lands on stderr and the
exit code is nonzero.
"""

import argparse
import json
import logging
import sys

from .errors import DarcydaError
from .experiment import (
    ExperimentConfig,
    cmd_diagnose,
    cmd_generate_data,
    cmd_run,
    cmd_train_surrogate,
)


def _add_common(sub):
    sub.add_argument("--config", metavar="PATH",
                     help="JSON config file overriding the desk-scale defaults")
    sub.add_argument("--seed", type=int, metavar="U64",
                     help="override the master seed")
    sub.add_argument("--out", required=True, metavar="DIR",
                     help="workspace directory")
    sub.add_argument("--paper-scale", action="store_true",
                     help="apply full-scale settings (50x50 mesh, 32 chains, "
                          "20000 steps, 16000 training samples) after the config file")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="darcyda",
        description="Surrogate-accelerated delayed-acceptance sampling "
                    "for steady Darcy flow inversion")
    subparsers = parser.add_subparsers(dest="command", required=True)

    sub = subparsers.add_parser("generate-data",
                                help="synthesize mesh, bases, and noisy observations")
    _add_common(sub)

    sub = subparsers.add_parser("train-surrogate",
                                help="build the training corpus and train the network")
    _add_common(sub)

    sub = subparsers.add_parser("run", help="sample the posterior")
    _add_common(sub)
    sub.add_argument("--strategy", choices=("vanilla", "da", "da-eem"),
                     help="override the configured sampling strategy")

    sub = subparsers.add_parser("diagnose",
                                help="autocorrelation/cost report for finished runs")
    sub.add_argument("run_dirs", nargs="+", metavar="RUN_DIR",
                     help="run directories written by `darcyda run`")
    sub.add_argument("--out", required=True, metavar="DIR",
                     help="directory for report.json and field statistics")
    return parser


def _resolve_config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "paper_scale", False):
        cfg = cfg.with_paper_scale()
    if getattr(args, "strategy", None):
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "strategy": args.strategy})
    if args.seed is not None:
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "master_seed": args.seed})
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stdout,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            cmd_diagnose(args.run_dirs, args.out)
        else:
            cfg = _resolve_config(args)
            if args.command == "generate-data":
                cmd_generate_data(cfg, args.out)
            elif args.command == "train-surrogate":
                cmd_train_surrogate(cfg, args.out)
            elif args.command == "run":
                cmd_run(cfg, args.out)
    except DarcydaError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except Exception as exc:  # keep stderr machine-readable
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
