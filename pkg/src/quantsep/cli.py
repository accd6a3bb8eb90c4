"""Command-line surface.

    quantsep <simulate|train|sensitivity|allocate|nas-search|quantize|
              evaluate|report|pipeline> --config cfg.json [--seed N]
              [--jobs N] [--out DIR]

Each command runs its pipeline stage (plus any missing upstream stages,
all content-cached under --out). Exit codes: 0 success, 2 configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import config as cfgmod
from . import alloc, dsp, nas, quant, sensitivity, sepnet
from .pipeline import Pipeline, PipelineError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_NUMERICAL_ERRORS = (
    sepnet.TrainingDiverged,
    sensitivity.SensitivityError,
    nas.NasError,
    alloc.AllocationError,
    quant.QuantError,
    FloatingPointError,
)
_CONFIG_ERRORS = (
    cfgmod.ConfigError,
    dsp.ConfigError,
    sepnet.CheckpointError,
    FileNotFoundError,
)

COMMANDS = (
    "simulate",
    "train",
    "sensitivity",
    "allocate",
    "nas-search",
    "quantize",
    "evaluate",
    "report",
    "pipeline",
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="quantsep",
        description="Train, quantize and evaluate a multi-channel speech separator.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=False, help="path to a RunConfig JSON file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the training/search/probe seeds")
    parser.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
    parser.add_argument("--out", default="runs/default", help="output directory")
    parser.add_argument("--force", action="store_true", help="ignore cached stage results")
    parser.add_argument("--quiet", action="store_true")
    return parser


def _load_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, seed=args.seed),
            sensitivity=dataclasses.replace(cfg.sensitivity, seed=args.seed),
            nas=dataclasses.replace(cfg.nas, seed=args.seed),
        )
    return cfg


def _dispatch(pipe, command):
    cfg = pipe.cfg
    if command == "simulate":
        pipe.simulate()
    elif command == "train":
        pipe.train()
    elif command == "sensitivity":
        pipe.sensitivity("hes")
        pipe.sensitivity("kl")
    elif command == "allocate":
        for budget in cfg.alloc.budgets:
            for metric in ("hes", "kl"):
                pipe.allocate(metric, budget)
    elif command == "nas-search":
        for budget in cfg.alloc.budgets:
            pipe.nas_search(budget)
    elif command == "quantize":
        for system in pipe._systems():
            pipe.quantize(system)
    elif command == "evaluate":
        for system in pipe._systems():
            pipe.evaluate(system)
    elif command == "report":
        pipe.report()
    elif command == "pipeline":
        pipe.report()
    else:  # pragma: no cover
        raise cfgmod.ConfigError(f"unknown command {command}")
    return pipe.finalize()


def main(argv=None):
    args = build_parser().parse_args(argv)
    log = (lambda *_: None) if args.quiet else print
    try:
        cfg = _load_config(args)
        pipe = Pipeline(cfg, args.out, jobs=args.jobs, force=args.force, log=log)
        run = _dispatch(pipe, args.command)
    except _CONFIG_ERRORS as exc:
        print(f"quantsep: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        cause = exc.cause
        if isinstance(cause, _CONFIG_ERRORS):
            print(f"quantsep: configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"quantsep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _NUMERICAL_ERRORS as exc:
        print(f"quantsep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    log(json.dumps({"config_hash": run["config_hash"], "out": args.out}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
