"""Command line entry point: ``ardistill <subcommand> [--config PATH] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .pipeline import Run, RunManifest, compare_runs, run_pipeline
from .stages import StageFailure
from .worlds import sample_sequences

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    p = argparse.ArgumentParser(prog="ardistill", description="Causal few-step distillation on synthetic sequential worlds.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write sampled sequences as CSV")
    g.add_argument("--num", type=int, default=1000, help="number of sequences")
    for name, text in (
        ("stage1", "train the AR diffusion teacher"),
        ("stage2", "run the configured stage-2 initialization"),
        ("stage3", "asymmetric DMD with self-rollout"),
        ("eval", "exposure-bias metrics of the latest student"),
        ("pipeline", "all stages and evaluation"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    c = sub.add_parser("compare", parents=[common], help="compare finished runs")
    c.add_argument("runs", nargs="+", type=Path, help="run directories")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    say = (lambda *a: None) if args.quiet else print
    try:
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = args.out
    try:
        if args.command == "gen-data":
            out.mkdir(parents=True, exist_ok=True)
            path = out / "sequences.csv"
            sample_sequences(cfg.world_spec(), args.num, cfg.seed).to_csv(path)
            say(f"wrote {path}")
        elif args.command == "pipeline":
            m = run_pipeline(cfg, out)
            say(json.dumps({"status": m.status, "config_hash": m.config_hash, "out": str(out)}))
            if m.status != "ok":
                print(f"error: {m.failed_stage} failed: {m.diagnostics}", file=sys.stderr)
                return EXIT_FAILED
        elif args.command == "compare":
            rows = compare_runs(args.runs, out)
            say((out / "compare.txt").read_text())
            if not rows:
                return EXIT_INVALID
        else:
            run = Run(cfg, out)
            if args.command == "eval":
                rep = run.evaluate("stage3" if "stage3" in run.manifest.checkpoints else "stage2")
                say(rep.to_json())
            else:
                report = getattr(run, args.command)()
                say(report.to_json())
    except (StageFailure, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
