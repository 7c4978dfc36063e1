"""Experiment plans, repeated runs and aggregation of convergence traces.

A plan is an INI file with a single ``[experiment]`` section::

    [experiment]
    problem = mb_10
    variant = pls+gaussian
    repetitions = 10
    total_budget = 810
    doe_size = d
    base_seed = 0
    output_directory = results/mb10

Optional keys: ``max_nb_it`` (otherwise derived from ``total_budget``),
``d_e`` (2), ``budget_per_subspace`` (20 * d_e), ``problem_seed`` (0),
``timing`` (``off`` or ``wall``) and ``workers`` (1).

``total_budget`` counts every evaluation including the initial design. When
``max_nb_it`` is given it is the iteration count of a two-method variant;
single-method variants run twice as many iterations so that all variants
spend the same budget.
"""

import configparser
import glob
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .optimizer import VARIANTS, EgorseConfig, read_history_csv, run_egorse
from .problems import get_problem, problem_dimension

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("problem", "variant", "total_budget", "doe_size", "base_seed",
                 "output_directory")
OPTIONAL_KEYS = ("repetitions", "max_nb_it", "d_e", "budget_per_subspace",
                 "problem_seed", "timing", "workers")
WORKERS_ENV = "EGORSE_WORKERS"


class PlanError(ValueError):
    """Invalid experiment plan; ``problems`` lists every violated check."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ExperimentPlan:
    problem_name: str
    variant: str
    repetitions: int
    total_budget: int
    doe_size: int
    base_seed: int
    output_directory: str
    config: EgorseConfig
    problem_seed: int = 0
    timing: bool = False
    workers: int = 1

    def describe(self):
        c = self.config
        lines = [
            f"problem            = {self.problem_name} (d = {c.d}, problem_seed = {self.problem_seed})",
            f"variant            = {self.variant} -> methods {', '.join(c.methods)}",
            f"repetitions        = {self.repetitions} (seeds {self.base_seed}..{self.base_seed + self.repetitions - 1})",
            f"d_e                = {c.d_e}",
            f"initial_doe_size   = {c.initial_doe_size}",
            f"max_nb_it          = {c.max_nb_it}",
            f"budget_per_subspace = {c.budget_per_subspace}",
            f"total_budget       = {self.total_budget} "
            f"= {c.initial_doe_size} + {c.max_nb_it} * {c.T} * {c.budget_per_subspace}",
            f"timing             = {'wall' if self.timing else 'off'}",
            f"workers            = {self.workers}",
            f"output_directory   = {self.output_directory}",
        ]
        return "\n".join(lines)


def _int(section, key, problems, default=None):
    if key not in section:
        if default is None:
            problems.append(f"{key}: missing")
        return default
    try:
        return int(section[key])
    except ValueError:
        problems.append(f"{key}: expected an integer, got {section[key]!r}")
        return default


def _doe_size(rule, d, problems):
    rule = rule.strip().lower()
    if rule == "d":
        return d
    if rule == "2d":
        return 2 * d
    try:
        n = int(rule)
    except ValueError:
        problems.append(f"doe_size: expected 5, d, 2d or an integer, got {rule!r}")
        return None
    if n < 2:
        problems.append(f"doe_size: must be at least 2, got {n}")
        return None
    return n


def parse_plan(text, base_dir="."):
    """Parse and validate a plan; raises :class:`PlanError` listing all problems."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise PlanError([f"unparseable plan: {exc}"]) from exc
    if "experiment" not in cp:
        raise PlanError(["missing [experiment] section"])
    sec = cp["experiment"]
    problems = []
    for key in sec:
        if key not in REQUIRED_KEYS + OPTIONAL_KEYS:
            problems.append(f"{key}: unknown key")
    for key in REQUIRED_KEYS:
        if key not in sec:
            problems.append(f"{key}: missing")
    if problems:
        raise PlanError(problems)

    variant = sec["variant"].strip().lower()
    if variant not in VARIANTS:
        problems.append(f"variant: unknown variant {sec['variant']!r} "
                        f"(expected one of {', '.join(VARIANTS)})")
    name = sec["problem"].strip()
    try:
        d = problem_dimension(name)
    except (KeyError, OSError, ValueError) as exc:
        problems.append(f"problem: {exc}")
        d = None
    reps = _int(sec, "repetitions", problems, 10)
    total = _int(sec, "total_budget", problems)
    seed = _int(sec, "base_seed", problems)
    d_e = _int(sec, "d_e", problems, 2)
    bps = _int(sec, "budget_per_subspace", problems, 20 * d_e if d_e else 40)
    problem_seed = _int(sec, "problem_seed", problems, 0)
    workers = _int(sec, "workers", problems, 1)
    timing = sec.get("timing", "off").strip().lower()
    if timing not in ("off", "wall"):
        problems.append(f"timing: expected 'off' or 'wall', got {timing!r}")
    if reps is not None and reps < 1:
        problems.append(f"repetitions: must be at least 1, got {reps}")
    if workers is not None and workers < 1:
        problems.append(f"workers: must be at least 1, got {workers}")
    doe = _doe_size(sec["doe_size"], d, problems) if d is not None else None
    if problems:
        raise PlanError(problems)

    methods = VARIANTS[variant]
    T = len(methods)
    if "max_nb_it" in sec:
        it = _int(sec, "max_nb_it", problems)
        if problems:
            raise PlanError(problems)
        n_it = it * 2 if T == 1 else it
    else:
        rest = total - doe
        if rest < 0 or rest % (T * bps):
            raise PlanError([
                f"total_budget: {total} - doe_size {doe} = {rest} is not a non-negative "
                f"multiple of T * budget_per_subspace = {T} * {bps}"
            ])
        n_it = rest // (T * bps)
    expected = doe + n_it * T * bps
    if expected != total:
        raise PlanError([
            f"total_budget: {total} != initial_doe_size + max_nb_it * T * "
            f"budget_per_subspace = {doe} + {n_it} * {T} * {bps} = {expected}"
        ])
    try:
        cfg = EgorseConfig(d=d, d_e=d_e, methods=methods, max_nb_it=n_it,
                           budget_per_subspace=bps, initial_doe_size=doe, seed=seed)
    except ValueError as exc:
        raise PlanError([f"config: {exc}"]) from exc
    out = sec["output_directory"].strip()
    if not os.path.isabs(out):
        out = os.path.join(base_dir, out)
    return ExperimentPlan(name, variant, reps, total, doe, seed, out, cfg,
                          problem_seed, timing == "wall", workers)


def load_plan(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise PlanError([f"cannot read plan: {exc}"]) from exc
    return parse_plan(text, os.path.dirname(os.path.abspath(path)))


def validate_plan(path):
    """Resolved-plan report starting with ``OK``; never evaluates the objective."""
    plan = load_plan(path)
    return "OK\n" + plan.describe()


def run_file(plan, r):
    return os.path.join(plan.output_directory, f"run_{r:03d}.csv")


def _run_one(plan, r):
    # Problems are rebuilt here so each worker owns its own evaluation counter
    problem = get_problem(plan.problem_name, plan.problem_seed)
    seed = plan.base_seed + r
    cfg = EgorseConfig(**{**plan.config.__dict__, "seed": seed})
    hist = run_egorse(problem, cfg, np.random.default_rng(seed))
    if len(hist) != cfg.total_evaluations or problem.evaluations != len(hist):
        raise RuntimeError(f"budget mismatch: {len(hist)} records, "
                           f"{problem.evaluations} evaluations, expected {cfg.total_evaluations}")
    hist.to_csv(run_file(plan, r), timing=plan.timing)
    return r


def _run_safe(plan, r):
    try:
        return r, _run_one(plan, r), None
    except Exception:  # one failing repetition must not stop the others
        return r, None, traceback.format_exc()


def run_experiment(plan, workers=None):
    """Run every repetition and write per-run CSVs plus ``aggregate.csv``.

    Returns the list of ``(repetition, error_text)`` failures; a manifest
    ``errors.txt`` is written when it is non-empty.
    """
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else plan.workers
    os.makedirs(plan.output_directory, exist_ok=True)
    reps = range(plan.repetitions)
    if workers <= 1:
        results = [_run_safe(plan, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_safe, [plan] * plan.repetitions, reps))
    failures = [(r, err) for r, _, err in results if err is not None]
    manifest = os.path.join(plan.output_directory, "errors.txt")
    if failures:
        with open(manifest, "w") as fh:
            for r, err in failures:
                fh.write(f"run {r} (seed {plan.base_seed + r}):\n{err}\n")
    elif os.path.exists(manifest):
        os.remove(manifest)
    done = [run_file(plan, r) for r, ok, _ in results if ok is not None]
    if done:
        aggregate(done).to_csv(os.path.join(plan.output_directory, "aggregate.csv"))
    return failures


@dataclass
class AggregateStats:
    eval_index: np.ndarray
    mean_best: np.ndarray
    std_best: np.ndarray
    std_best_div4: np.ndarray
    mean_wall_clock_s: np.ndarray
    n_runs: int

    def to_csv(self, path=None):
        lines = ["eval_index,mean_best,std_best,std_best_div4,mean_wall_clock_s"]
        for row in zip(self.eval_index, self.mean_best, self.std_best,
                       self.std_best_div4, self.mean_wall_clock_s):
            lines.append(f"{row[0]}," + ",".join(f"{v:.17g}" for v in row[1:]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def history_files(directory):
    return sorted(glob.glob(os.path.join(directory, "run_*.csv")))


def aggregate(files):
    """Mean and population std of best-so-far across history files."""
    if not files:
        raise ValueError("no history files to aggregate")
    runs = [read_history_csv(f) for f in files]
    lengths = {len(r["eval_index"]) for r in runs}
    if len(lengths) != 1:
        raise ValueError(f"history files differ in length: {sorted(lengths)}")
    best = np.array([r["best_so_far"] for r in runs])
    wall = np.array([r["wall_clock_s"] for r in runs])
    std = best.std(axis=0)
    return AggregateStats(runs[0]["eval_index"], best.mean(axis=0), std, std / 4.0,
                          wall.mean(axis=0), len(runs))
