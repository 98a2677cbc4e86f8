"""Command-line experiment driver.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datasynth, experiments, gradcore as gc
from .config import ConfigError, load_config, with_updates
from .diagnostics import NumericError
from .hypersphere import DegenerateEmbeddingError
from .training import TrainDivergedError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")


def _load(args) -> "ExperimentConfig":
    cfg = load_config(args.config, overrides=args.override)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    return with_updates(cfg, **updates) if updates else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spherecloud",
        description="Hyperspherical-embedding experiments on synthetic point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-count", type=int, default=datasynth.DEFAULT_TRAIN_COUNT)
    p.add_argument("--test-count", type=int, default=datasynth.DEFAULT_TEST_COUNT)
    p.add_argument("--complete-points", type=int, default=datasynth.DEFAULT_N_COMPLETE)
    p.add_argument("--partial-points", type=int, default=datasynth.DEFAULT_N_PARTIAL)

    p = sub.add_parser("dataset-stats", help="print dataset header and class counts")
    p.add_argument("--data", required=True)

    for name in ("train", "sweep-lr", "ablate", "compare-multitask"):
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "sweep-lr":
            p.add_argument("--lrs", default=None,
                           help="comma-separated learning rates (default 1e-3,1e-2,1e-1,1)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("diagnose", help="write the diagnostic bundle for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--interpolate", default=None, metavar="I,J",
                   help="also decode an interpolation between samples I and J")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--mode", choices=["linear", "spherical"], default=None)

    p = sub.add_parser("interpolate", help="decode an embedding interpolation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--src", type=int, required=True)
    p.add_argument("--dst", type=int, required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--mode", choices=["linear", "spherical"], default=None)
    p.add_argument("--out", required=True)

    return parser


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_s = datasynth.generate_dataset(
        args.train_count, args.seed, 0, args.complete_points, args.partial_points)
    test_s = datasynth.generate_dataset(
        args.test_count, args.seed, datasynth._TEST_INDEX_BASE,
        args.complete_points, args.partial_points)
    datasynth.write_dataset(out / "train.hpcd", train_s)
    datasynth.write_dataset(out / "test.hpcd", test_s)
    print(json.dumps({
        "train": datasynth.dataset_stats(train_s),
        "test": datasynth.dataset_stats(test_s),
    }, sort_keys=True))
    return EXIT_OK


def _cmd_dataset_stats(args) -> int:
    samples = datasynth.read_dataset(args.data)
    print(json.dumps(datasynth.dataset_stats(samples), sort_keys=True))
    return EXIT_OK


def _cmd_train(args) -> int:
    result = train(_load(args))
    last = result.records[-1].to_json_dict() if result.records else {}
    print(json.dumps({
        "checkpoint": result.checkpoint_path,
        "metrics": result.metrics_path,
        "final": last,
    }, sort_keys=True))
    return EXIT_OK


def _cmd_sweep_lr(args) -> int:
    cfg = _load(args)
    lrs = experiments.DEFAULT_SWEEP_LRS
    if args.lrs:
        lrs = tuple(float(x) for x in args.lrs.split(","))
    rows = experiments.sweep_lr(cfg, lrs)
    print(json.dumps(rows, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    rows = experiments.ablate(_load(args))
    print(json.dumps(rows, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args) -> int:
    rows = experiments.compare_multitask(_load(args))
    print(json.dumps(rows, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    print(json.dumps(experiments.eval_checkpoint(args.checkpoint, args.data), sort_keys=True))
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    pair = None
    if args.interpolate:
        parts = args.interpolate.split(",")
        if len(parts) != 2:
            raise ConfigError(f"--interpolate expects I,J, got {args.interpolate!r}")
        pair = (int(parts[0]), int(parts[1]))
    experiments.diagnose(
        args.checkpoint, args.data, args.out, bins=args.bins,
        interpolate_pair=pair, interpolate_steps=args.steps, interpolate_mode=args.mode,
    )
    print(json.dumps({"out": args.out}, sort_keys=True))
    return EXIT_OK


def _cmd_interpolate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = experiments.diagnose(
        args.checkpoint, args.data, out, interpolate_pair=(args.src, args.dst),
        interpolate_steps=args.steps, interpolate_mode=args.mode,
    )
    print(json.dumps({"out": str(out), "steps": bundle["interpolation"]["steps"],
                      "mode": bundle["interpolation"]["mode"]}, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "dataset-stats": _cmd_dataset_stats,
    "train": _cmd_train,
    "sweep-lr": _cmd_sweep_lr,
    "ablate": _cmd_ablate,
    "compare-multitask": _cmd_compare,
    "eval": _cmd_eval,
    "diagnose": _cmd_diagnose,
    "interpolate": _cmd_interpolate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainDivergedError, DegenerateEmbeddingError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (gc.FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
