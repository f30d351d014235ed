"""Command-line entry point: ``dgkip {distill,kip,certify,eval,transfer}``.

Exit codes: 0 success, 1 runtime failure, 2 usage / config / missing file,
3 finished but some solver did not converge.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import RunConfig, apply_override, load_config
from .data import DataFormatError
from . import pipeline

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="run seed (init, features unless set)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--ipc", type=int, help="synthetic samples per class")
    p.add_argument("--loss", choices=("logistic", "hinge"))
    p.add_argument("--steps", type=int)
    p.add_argument("--feature-map", choices=("linear", "random_fourier", "random_mlp", "random_conv"))
    p.add_argument("--detach-alpha", action="store_true", default=None)
    p.add_argument("--learn-labels", action="store_true", default=None)
    p.add_argument("--train", help="training CSV (sets data.dataset=csv)")
    p.add_argument("--test", help="test CSV")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgkip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("distill", help="train theta_O and distill a synthetic set")
    p.add_argument("--method", choices=("dgkip", "kip"))
    _common(p)
    _common(sub.add_parser("kip", help="distill with the KIP (ridge) objective"))
    for name, text in (("certify", "test-error bounds from the gap"),
                       ("eval", "retrain on the synthetic set and report accuracy"),
                       ("transfer", "retrain the other loss family on the synthetic set")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", help="theta_O checkpoint (default OUT/model.dgkm)")
        p.add_argument("--synthetic", help="synthetic set (default OUT/synthetic.dgk)")
        _common(p)
    return parser


def make_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.train:
        cfg.data.dataset = "csv"
        cfg.data.train = args.train
    if args.test:
        cfg.data.test = args.test
    for section, key, value in (
        ("run", "seed", args.seed), ("run", "out", args.out), ("distill", "ipc", args.ipc),
        ("model", "loss", args.loss), ("distill", "steps", args.steps),
        ("features", "kind", args.feature_map), ("distill", "detach_alpha", args.detach_alpha),
        ("distill", "learn_labels", args.learn_labels),
    ):
        if value is not None:
            cfg.set(section, key, value)
    if getattr(args, "method", None):
        cfg.distill.method = args.method
    for item in args.set:
        apply_override(cfg, item)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        if args.command == "distill":
            result = pipeline.run_distill(cfg)
        elif args.command == "kip":
            result = pipeline.run_distill(cfg, method="kip")
        elif args.command == "certify":
            result = pipeline.run_certify(cfg, args.checkpoint, args.synthetic)
        elif args.command == "eval":
            result = pipeline.run_eval(cfg, args.synthetic, args.checkpoint)
        else:
            result = pipeline.run_transfer(cfg, args.synthetic, args.checkpoint)
    except FileNotFoundError as e:
        print(f"dgkip: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.ConfigError, KeyError) as e:
        print(f"dgkip: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ValueError, ArithmeticError, RuntimeError) as e:
        print(f"dgkip: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(result.summary)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED
