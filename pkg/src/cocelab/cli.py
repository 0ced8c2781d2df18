"""Command line entry point.

    cocelab run CONFIG --out DIR [--jobs N]
    cocelab summarize DIR
    cocelab gen-data CONFIG --out CSV [--split train|val|test]
    cocelab check

Exit codes: 0 success, 1 configuration error, 2 runtime failure in at least one cell.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .data import generate_dataset, save_csv
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _cmd_run(args):
    cfg = harness.load_config(args.config)
    records = harness.run_experiment(cfg, jobs=args.jobs)
    harness.write_outputs(records, cfg, args.out)
    failed = [r for r in records if r.status != "ok"]
    print(f"{len(records)} cells, {len(failed)} failed -> {args.out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _cmd_summarize(args):
    records = harness.load_records(args.dir)
    rows = harness.summarize(records)
    harness.write_summary(rows, Path(args.dir) / "summary.csv")
    for row in rows:
        hyper = "-" if row["hyper"] is None else f"{row['hyper']:g}"
        flag = " (single trial)" if row["single_trial"] else ""
        print(f"{row['method']:<12} {hyper:>6}  bal.acc {row['balanced_accuracy_mean']:.4f}"
              f" +- {row['balanced_accuracy_std']:.4f}  acc {row['average_accuracy_mean']:.4f}"
              f"  failed {row['failed']}{flag}")
    return EXIT_RUNTIME if any(r["failed"] for r in rows) else EXIT_OK


def _cmd_gen_data(args):
    cfg = harness.load_config(args.config)
    save_csv(generate_dataset(cfg.data)[args.split], args.out)
    return EXIT_OK


def _cmd_check(args):
    from .checks import run_checks

    results = run_checks(args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser():
    p = argparse.ArgumentParser(prog="cocelab", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep")
    run.add_argument("config")
    run.add_argument("--out", required=True)
    run.add_argument("--jobs", type=int, default=1, help="worker processes (cells are independent)")
    run.set_defaults(func=_cmd_run)

    summ = sub.add_parser("summarize", help="rebuild summary.csv from a run directory")
    summ.add_argument("dir")
    summ.set_defaults(func=_cmd_summarize)

    gen = sub.add_parser("gen-data", help="write one split of the configured dataset as CSV")
    gen.add_argument("config")
    gen.add_argument("--out", required=True)
    gen.add_argument("--split", choices=("train", "val", "test"), default="train")
    gen.set_defaults(func=_cmd_gen_data)

    chk = sub.add_parser("check", help="run the oracle self-checks")
    chk.add_argument("--seed", type=int, default=0)
    chk.set_defaults(func=_cmd_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
