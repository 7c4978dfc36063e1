"""Command line entry point: ``egorse run|validate|aggregate``."""

import argparse
import logging
import os
import sys

from .experiment import PlanError, aggregate, history_files, load_plan, run_experiment, validate_plan

EXIT_OK = 0
EXIT_PLAN = 2
EXIT_PARTIAL = 3


def _cmd_validate(args):
    print(validate_plan(args.plan))
    return EXIT_OK


def _cmd_run(args):
    plan = load_plan(args.plan)
    print(plan.describe())
    failures = run_experiment(plan, workers=args.workers)
    if failures:
        for r, _ in failures:
            print(f"run {r} failed (see errors.txt)", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"wrote {plan.repetitions} runs to {plan.output_directory}")
    return EXIT_OK


def _cmd_aggregate(args):
    files = history_files(args.directory)
    try:
        stats = aggregate(files)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    out = os.path.join(args.directory, "aggregate.csv")
    stats.to_csv(out)
    print(f"aggregated {stats.n_runs} runs into {out}; final mean best {stats.mean_best[-1]:.6g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="egorse", description="High-dimensional BO with linear embeddings")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every repetition of a plan")
    r.add_argument("plan")
    r.add_argument("--workers", type=int, default=None,
                   help="parallel repetitions (default: EGORSE_WORKERS or the plan)")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("validate", help="check a plan without evaluating anything")
    v.add_argument("plan")
    v.set_defaults(func=_cmd_validate)
    a = sub.add_parser("aggregate", help="aggregate run_*.csv files of a directory")
    a.add_argument("directory")
    a.set_defaults(func=_cmd_aggregate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PlanError as exc:
        print("plan error:", file=sys.stderr)
        for msg in exc.problems:
            print(f"  {msg}", file=sys.stderr)
        return EXIT_PLAN


if __name__ == "__main__":
    sys.exit(main())
