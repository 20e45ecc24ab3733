"""Command-line driver for the monitor-synthesis pipeline.

Commands mirror the pipeline stages and operate on one run directory;
`pipeline` chains them all. Every command takes --config/--out/--seed.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline as pl
from .config import ConfigError, default_config, load_config
from .modelserver import serve


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="pipeline config JSON (defaults used when omitted)")
    sub.add_argument("--out", default="run", help="run directory (default: ./run)")
    sub.add_argument("--seed", type=int, help="override the master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safemon",
        description="Synthesize and evaluate a runtime safety monitor for an "
                    "image classifier via systematically degraded datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic working corpus")
    _add_common(p)
    p.add_argument("--emit", choices=["packed", "ppm", "both"], default="packed")

    p = sub.add_parser("ingest", help="load a manifest/packed corpus from disk")
    _add_common(p)

    for name, desc in [
        ("train-component", "train (or attach) the classifier; report clean accuracy"),
        ("assess", "measure the classifier on every degraded dataset"),
        ("label", "label records against thresholds; write heatmap"),
        ("prepare", "build the monitor train/test split"),
        ("train-monitor", "train the safety monitor"),
        ("eval-monitor", "held-out evaluation plus k-fold cross-validation"),
        ("run", "simulate a drift scenario with the deployed monitor"),
    ]:
        p = sub.add_parser(name, help=desc)
        _add_common(p)

    p = sub.add_parser("degrade", help="generate all degraded datasets")
    _add_common(p)
    p.add_argument("--dry-run", action="store_true",
                   help="print the combination accounting without generating")

    p = sub.add_parser("pipeline", help="run every stage in order")
    _add_common(p)
    p.add_argument("--stage-from", default="corpus", choices=pl.STAGE_ORDER)
    p.add_argument("--stage-to", default="run", choices=pl.STAGE_ORDER)

    p = sub.add_parser("default-config", help="print the default config JSON")

    p = sub.add_parser("serve-model", help="serve a saved model over the "
                                           "external inference protocol")
    p.add_argument("model", help="path to a .mfm model file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "default-config":
        json.dump(default_config(), sys.stdout, indent=2, sort_keys=True)
        print()
        return 0
    if args.command == "serve-model":
        return serve(args.model)
    try:
        cfg = load_config(args.config, seed=args.seed)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        with pl.run_lock(args.out):
            if args.command == "synth":
                if cfg.corpus["kind"] != "synthetic":
                    raise ConfigError("synth requires a synthetic corpus config; use ingest")
                pl.stage_corpus(cfg, args.out, emit=args.emit)
            elif args.command == "ingest":
                if cfg.corpus["kind"] == "synthetic":
                    raise ConfigError("ingest requires a manifest/packed corpus; use synth")
                pl.stage_corpus(cfg, args.out)
            elif args.command == "degrade":
                pl.stage_degrade(cfg, args.out, dry_run=args.dry_run)
            elif args.command == "pipeline":
                pl.run_pipeline(cfg, args.out, args.stage_from, args.stage_to)
            else:
                stage = {
                    "train-component": pl.stage_train_component,
                    "assess": pl.stage_assess,
                    "label": pl.stage_label,
                    "prepare": pl.stage_prepare,
                    "train-monitor": pl.stage_train_monitor,
                    "eval-monitor": pl.stage_eval_monitor,
                    "run": pl.stage_run,
                }[args.command]
                stage(cfg, args.out)
    except (pl.PrerequisiteError, pl.StalenessError, pl.LockError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
