"""Command-line entry point.

Subcommands: ingest, hash, manifold, fuse, train, evaluate, predict, synth.
Exit codes: 0 ok, 1 config error, 2 missing prerequisite, 3 numeric failure.
HISTOFUSE_OUT overrides --out when set.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, MissingArtifactError, NumericError


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="pipeline config file (key=value sections)")
    common.add_argument("--out", metavar="DIR",
                        help="output directory for artifacts")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the pipeline seed")
    common.add_argument("--threads", type=int, metavar="N",
                        help="worker cap; 1 guarantees bit determinism")
    common.add_argument("--magnification",
                        choices=["40", "100", "200", "400", "all"],
                        help="restrict to one magnification")
    common.add_argument("--task", choices=["binary", "multiclass"],
                        help="restrict evaluation to one task")

    parser = argparse.ArgumentParser(
        prog="histofuse",
        description="Histopathology classification pipeline "
                    "(manifold + hash fusion + SSAE)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "build manifest, splits and stain reference",
        "hash": "compute per-patch hash signatures",
        "manifold": "fit per-class landmark-Isomap models",
        "fuse": "fit DCA and write fused feature vectors",
        "train": "pretrain and fine-tune the SSAE classifier",
        "evaluate": "score the test split and write reports",
        "predict": "predict labels for every image in the dataset",
        "synth": "generate the synthetic 8-class corpus",
    }
    for command, text in helps.items():
        p = sub.add_parser(command, parents=[common], help=text)
        if command == "evaluate":
            p.add_argument("--patch-level", action="store_true",
                           help="also write patch-level metrics")
    return parser


def _apply_overrides(cfg, args) -> None:
    if args.out is not None:
        cfg.set("run", "out_dir", args.out)
    env_out = os.environ.get("HISTOFUSE_OUT")
    if env_out:
        cfg.set("run", "out_dir", env_out)
    if args.seed is not None:
        cfg.set("dataset", "seed", str(args.seed))
    if args.threads is not None:
        cfg.set("run", "threads", str(args.threads))
    if args.magnification is not None:
        cfg.set("run", "magnification", args.magnification)
    if args.task is not None:
        cfg.set("run", "task", args.task)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        if args.command == "ingest":
            pipeline.run_ingest(cfg)
        elif args.command == "hash":
            pipeline.run_hash(cfg)
        elif args.command == "manifold":
            pipeline.run_manifold(cfg)
        elif args.command == "fuse":
            pipeline.run_fuse(cfg)
        elif args.command == "train":
            pipeline.run_train(cfg)
        elif args.command == "evaluate":
            pipeline.run_evaluate(cfg, patch_level=args.patch_level)
        elif args.command == "predict":
            pipeline.run_predict(cfg)
        elif args.command == "synth":
            pipeline.run_synth(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
