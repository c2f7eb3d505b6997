# main.py
"""
Command-line entry point.

    python main.py plan --config configs/plan.toml
    python main.py train --config configs/train.toml --out out/
    python main.py sweep --config configs/sweep_dataset.toml --parallel 4
    python main.py verify-theorem1 --config configs/verify.toml [--control eps]
    python main.py ema-check
    python main.py report --out out/

Exit codes: 0 success, 1 failed verification or check, 2 invalid config.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from dotenv import load_dotenv

from adamw_ema.config import load_config, load_file
from adamw_ema.db import default_url, get_engine, init_db
from adamw_ema.errors import AdamwEmaError, ConfigError
from adamw_ema.harness import CONTROLS, GridSpec, ema_checks, index_records, sweep, train, verify_theorem1
from adamw_ema.report import load_records, read_series, write_report
from adamw_ema.transfer import BaseRun, plan
from adamw_ema.utils import ensure_dir, log_level

logger = logging.getLogger("adamw_ema")

BASE_RUN_KEYS = ("eta_base", "lam_base", "eps_base", "sigma_base", "N_base", "B", "fan_in_base")
PLAN_REQUEST_KEYS = ("s", "fan_in", "N_new", "tau_epoch_target", "c")


# ---------- helpers ----------
def _emit(df: pd.DataFrame, fmt: str):
    if fmt == "json":
        print(df.to_json(orient="records", indent=2))
    else:
        print(df.to_string(index=False))


def _engine(out: str):
    ensure_dir(out)
    engine = get_engine(default_url(out))
    init_db(engine)
    return engine


# ---------- commands ----------
def cmd_plan(args) -> int:
    flat = load_file(args.config)
    unknown = sorted(set(flat) - set(BASE_RUN_KEYS) - set(PLAN_REQUEST_KEYS))
    if unknown:
        raise ConfigError(f"unknown plan keys: {unknown}")
    base = BaseRun(**{k: flat[k] for k in BASE_RUN_KEYS if k in flat})
    df = plan(base, **{k: flat[k] for k in PLAN_REQUEST_KEYS if k in flat})
    out = ensure_dir(args.out)
    if args.format == "json":
        (out / "plan.json").write_text(df.to_json(orient="records", indent=2), encoding="utf-8")
    else:
        df.to_csv(out / "plan.csv", index=False)
    _emit(df, args.format)
    return 0


def cmd_train(args) -> int:
    overrides = {"init_seed": args.seed} if args.seed is not None else None
    config = load_config(args.config, overrides)
    record = train(config)
    df = write_report([record], args.out)
    index_records(_engine(args.out), [record], str(Path(args.out) / "runs"))
    _emit(df, args.format)
    return 0


def cmd_sweep(args) -> int:
    flat = load_file(args.config)
    if args.seed is not None:
        flat["init_seed"] = args.seed
    grid = GridSpec.from_dict(flat)
    records, _ = sweep(grid, parallel=args.parallel)
    df = write_report(records, args.out, grid.series)
    index_records(_engine(args.out), records, str(Path(args.out) / "runs"))
    diverged = int(df["diverged"].sum())
    if diverged:
        logger.warning("%d of %d runs diverged", diverged, len(df))
    _emit(df, args.format)
    return 0


def cmd_verify(args) -> int:
    overrides = {"init_seed": args.seed} if args.seed is not None else None
    config = load_config(args.config, overrides)
    report = verify_theorem1(config, args.c, steps=args.steps, tol=args.tol,
                             output_tol=args.output_tol, control=args.control,
                             engine=_engine(args.out))
    _emit(report.frame(), args.format)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"\n{verdict} ({report.steps} steps, tol {report.tol:g}, output tol {report.output_tol:g}"
          + (f", control: {report.control})" if report.control else ")"))
    return 0 if report.passed else 1


def cmd_ema_check(args) -> int:
    df = ema_checks(samples=args.samples, parallel=args.parallel, seed=args.seed or 0, progress=True)
    _emit(df, args.format)
    return 0 if df["passed"].all() else 1


def cmd_report(args) -> int:
    records = load_records(args.out)
    if not records:
        raise ConfigError(f"no run records under {args.out}")
    # without --series, rank within the series the sweep was written with
    series = read_series(args.out) if args.series is None else args.series
    df = write_report(records, args.out, series)
    _emit(df, args.format)
    return 0


# ---------- argparse ----------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adamw-ema", description="AdamW timescale experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the init seed")
    common.add_argument("--parallel", type=int, default=1)
    common.add_argument("--format", choices=["csv", "json"], default="csv")

    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("plan", parents=[common], help="transfer hyperparameters from a base run")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", parents=[common], help="single training run")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="grid sweep")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theorem1", parents=[common], help="trajectory equivalence check")
    p.add_argument("--config", required=True)
    p.add_argument("--c", type=float, nargs="+", default=[0.5, 2.0, 10.0])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--output-tol", type=float, default=1e-8)
    p.add_argument("--control", choices=CONTROLS, default=None,
                   help="drop one hypothesis on purpose (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ema-check", parents=[common], help="closed-form EMA checks")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.set_defaults(func=cmd_ema_check)

    p = sub.add_parser("report", parents=[common], help="rebuild summary files from run records")
    p.add_argument("--series", nargs="*", default=None)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except AdamwEmaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
