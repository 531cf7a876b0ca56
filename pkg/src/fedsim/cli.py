"""Command-line entry point: ``fedsim {gen,train,eval,report,innovation}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, ExperimentConfig, resolve
from .pipeline import (
    PipelineError,
    cmd_eval,
    cmd_gen,
    cmd_innovation,
    cmd_report,
    cmd_train,
    load_run_config,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen": "generate one synthetic dataset per replication seed",
        "train": "train every (mode, algorithm, strategy, seed) cell",
        "eval": "decile perplexity / RCP reports for trained checkpoints",
        "report": "aggregate eval CSVs into per-figure tables",
        "innovation": "innovation repartition of utterances over continual periods",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("fedsim-out"), help="output directory")
        p.add_argument("--seed", type=int, help="run a single replication seed")
        p.add_argument("--force", action="store_true", help="overwrite existing dataset files")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named defaults (default: paper)")
    return parser


def _config(args, prefer_saved: bool) -> ExperimentConfig:
    overrides = {"seeds": [args.seed]} if args.seed is not None else {}
    saved = args.out / "config.json"
    if prefer_saved and args.config is None and args.preset is None and saved.exists():
        cfg = load_run_config(args.out)
        return resolve(saved, None, overrides) if overrides else cfg
    return resolve(args.config, args.preset, overrides)


def run(args) -> int:
    if args.command == "gen":
        cfg = _config(args, prefer_saved=False)
        for s in cmd_gen(cfg, args.out, force=args.force):
            print(f"{s.path}: M={s.devices} n={s.utterances} max/min n_m={s.spread:.1f}")
        return EXIT_OK
    if args.command == "train":
        cfg = _config(args, prefer_saved=True)
        failures = cmd_train(cfg, args.out)
        for f in failures:
            print(f"FAILED {f}", file=sys.stderr)
        return EXIT_RUNTIME if failures else EXIT_OK
    if args.command == "eval":
        print(cmd_eval(_config(args, prefer_saved=True), args.out))
        return EXIT_OK
    if args.command == "innovation":
        print(cmd_innovation(_config(args, prefer_saved=True), args.out))
        return EXIT_OK
    if args.command == "report":
        print(cmd_report(args.out))
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        print(f"fedsim: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, OSError, ValueError) as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
