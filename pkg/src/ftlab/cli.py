"""Command-line entry point: ``ftlab {prepare,train,optimize,report}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import ColaFormatError, Splits, balance, read_cola_tsv, synthetic_splits, write_splits
from .experiment import (
    REPORT_FORMATS,
    ConfigError,
    DataConfig,
    ExperimentConfig,
    ReportError,
    load_config,
    report,
    run_optimize,
    run_training,
)
from .tensor import make_rng
from .training import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ftlab", description="Desk-scale fine-tuning lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="write train/id_eval/ood_eval splits")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true", help="generate the agreement corpus")
    src.add_argument("--cola", nargs=3, metavar=("TRAIN", "ID_DEV", "OOD_DEV"), help="CoLA TSV files")
    p.add_argument("--n", type=int, default=2000, help="synthetic train size (eval splits get n // 4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balance", action="store_true", help="down-sample CoLA splits to equal labels")
    p.add_argument("--out", required=True, type=Path)

    for name, text in (("train", "train one model"), ("optimize", "hyperparameter search")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="experiment config (JSON); defaults are used if omitted")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--synthetic", action="store_true", help="use the synthetic corpus")
        p.add_argument("--n", type=int, help="synthetic train size")
        if name == "optimize":
            p.add_argument("--trials", type=int, help="number of trials")

    p = sub.add_parser("report", help="accuracy and efficiency tables from traces")
    p.add_argument("paths", nargs="+", type=Path, help="trace files or run directories")
    p.add_argument("--curves", type=Path, help="also write per-epoch curves as CSV")
    p.add_argument("--format", choices=REPORT_FORMATS, default="markdown", help="table layout")
    p.add_argument("--out", type=Path, help="write the tables here as well as to stdout")
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    if args.synthetic or args.n is not None:
        cfg = replace(cfg, data=DataConfig(synthetic=True, n=args.n if args.n is not None else cfg.data.n))
    if getattr(args, "trials", None) is not None:
        cfg = replace(cfg, n_trials=args.trials)
    cfg.validate()
    return cfg


def cmd_prepare(args) -> int:
    if args.synthetic:
        if args.n < 2:
            raise UsageError("--n must be at least 2")
        splits = synthetic_splits(args.n, args.seed)
    else:
        for path in map(Path, args.cola):
            if not path.is_file():
                raise ConfigError(f"input file not found: {path}")
        parts = [read_cola_tsv(p) for p in args.cola]
        if args.balance:
            rng = make_rng(args.seed)
            parts = [balance(p, rng) for p in parts]
        splits = Splits(*parts)
    stats = write_splits(splits, args.out)
    for name, s in stats.items():
        print(f"{name}: n={s['n']} label_0={s['label_0']} label_1={s['label_1']}")
    return EXIT_OK


def cmd_train(args) -> int:
    res = run_training(_experiment(args))
    print(f"run {res.trace.run_id}: max id {res.objective:.4f}, max ood {res.max_ood:.4f} -> {res.out_dir}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _experiment(args)
    best, trials = run_optimize(cfg)
    failed = sum(t.status != "ok" for t in trials)
    print(f"{len(trials)} trials ({failed} failed); best #{best.id} objective {best.objective:.4f}")
    print(json.dumps(best.assignment, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    text = report(args.paths, args.curves, args.format)
    sys.stdout.write(text)
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "optimize": cmd_optimize, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ReportError, ColaFormatError, RuntimeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
