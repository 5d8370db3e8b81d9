"""Command-line entry point: ``assoclearn <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .data import SUITE_TASKS

_SUITE_ALIASES = {"dfd": "dfd_like", "gld": "gld_like", "dfd_like": "dfd_like", "gld_like": "gld_like"}


def _config(args) -> runner.RunConfig:
    overrides = {}
    for item in args.set or ():
        key, _, value = item.partition("=")
        overrides[key.strip()] = value
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    text += "".join(f"\n{k} = {v}" for k, v in overrides.items())
    cfg = runner.parse_config(text)
    if getattr(args, "out", None):
        cfg = cfg.replace(out_dir=args.out)
    return cfg


def _add_config_args(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    if out:
        p.add_argument("--out", help="output directory (overrides out_dir)")


def _print_rows(rows) -> None:
    if not rows:
        return
    cols = list(rows[0])
    print("\t".join(cols))
    for r in rows:
        print("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))


def cmd_gen_data(args) -> int:
    suite = _SUITE_ALIASES[args.suite]
    dirs = runner.generate_data(suite, Path(args.out), args.train, args.test, args.seed)
    print(f"wrote {len(dirs)} tasks of {suite} to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.method:
        cfg = cfg.replace(method=args.method)
    out = Path(cfg.out_dir)
    res = runner.execute(cfg, out, None)
    col = runner.metric_column(cfg.suite)
    print(f"{cfg.label}: final AVG {col} = {res.final_avg(col):.4f}; outputs in {out}")
    return 0


def cmd_suite(args) -> int:
    cfg = _config(args)
    try:
        out = runner.run_suite(cfg)
    except runner.TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(runner.report(out, "md"))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _print_rows(runner.ablate(cfg, cfg.out_dir, runner.RunCache()))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [float(v) for v in args.values.split(",") if v]
    _print_rows(runner.sweep(cfg, args.param, values, cfg.out_dir, runner.RunCache()))
    return 0


def cmd_sequence(args) -> int:
    cfg = _config(args)
    perms = runner.parse_perms(args.perms, SUITE_TASKS[cfg.suite])
    _print_rows(runner.sequence_study(cfg, perms, cfg.out_dir, runner.RunCache()))
    return 0


def cmd_report(args) -> int:
    text = runner.report(args.inp, args.format)
    Path(args.inp, f"report.{args.format}").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="assoclearn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a task suite as PGM/PPM images plus manifests")
    p.add_argument("--suite", choices=sorted(_SUITE_ALIASES), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="train and evaluate one method")
    _add_config_args(p)
    p.add_argument("--method", choices=runner.METHODS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="generate data, run every configured method, aggregate CSVs")
    _add_config_args(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("ablate", help="run the six component masks")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one run per value of a config parameter")
    _add_config_args(p)
    p.add_argument("--param", default="lambda_prime")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sequence", help="one run per task arrival order")
    _add_config_args(p)
    p.add_argument("--perms", default="all", help="'all' or orders like '1,2,3,4;4,3,2,1'")
    p.set_defaults(func=cmd_sequence)

    p = sub.add_parser("report", help="summarize metrics.csv as a task matrix")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--format", choices=("csv", "md"), default="md")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (runner.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
