"""Command line entry point: ``lps <gen-data|train|eval|sweep|diagnose>``."""
import argparse
import json
import sys
from pathlib import Path

from .agents import TrainingDiverged
from .config import ALPHA_GRID, build_config, config_fields
from .experiments import (
    InvariantViolation, run_diagnostics, run_eval, run_gen_data, run_sweep, run_train,
)

EXIT_ERROR = 1
EXIT_INVARIANT = 3


def _add_config_flags(parser):
    parser.add_argument("--config", help="JSON or YAML file with config fields")
    parser.add_argument("--out", required=True, help="output directory")
    group = parser.add_argument_group("config overrides")
    for name, f in config_fields().items():
        flag = "--" + name.replace("_", "-")
        if name == "seed":
            parser.add_argument(flag, type=int, default=None, help="random seed")
            continue
        group.add_argument(flag, dest=name, default=None, metavar=name.upper(),
                           help=f"override {name} (default {f.default!r})")


def build_parser():
    parser = argparse.ArgumentParser(prog="lps", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a demonstration dataset")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one agent")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="train once per alpha")
    _add_config_flags(p)
    p.add_argument("--alphas", default=",".join(f"{a:g}" for a in ALPHA_GRID),
                   help="comma separated alpha values")
    p.add_argument("--scale-target", choices=("regularizer", "base_loss"), default=None)

    p = sub.add_parser("diagnose", help="gradient-cosine map, latent norms and OOD map")
    _add_config_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--metrics", default=None)
    p.add_argument("--grid", type=int, default=64, help="number of latent grid cells")
    p.add_argument("--self-test", action="store_true",
                   help="compare the composed gradient with itself")
    return parser


def config_from_args(args):
    overrides = {name: getattr(args, name) for name in config_fields() if getattr(args, name, None) is not None}
    return build_config(args.config, overrides)


def _print(obj):
    print(json.dumps(obj, sort_keys=True, indent=1, default=str))


def dispatch(args):
    cfg = config_from_args(args)
    out = Path(args.out)
    if args.command == "gen-data":
        return run_gen_data(cfg, out)
    if args.command == "train":
        res = run_train(cfg, out)
        res.pop("state")
        return res
    if args.command == "eval":
        return run_eval(args.checkpoint, out, cfg.eval_episodes, cfg.seed)
    if args.command == "sweep":
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
        return run_sweep(cfg, alphas, out, args.scale_target)
    return run_diagnostics(args.checkpoint, out, args.metrics, args.grid, args.self_test, cfg.seed)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _print(dispatch(args))
    except (InvariantViolation, TrainingDiverged) as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
