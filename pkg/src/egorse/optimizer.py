"""The adaptive outer loop.

Each outer iteration cycles over the configured embedding builders. Every
builder yields a subspace in which a constrained BO run spends a fixed
budget; all full-space points evaluated during the iteration are then merged
into the archive that the supervised builders learn from.
"""

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import cbo, embeddings, gp as gpmod
from .sampling import latin_hypercube
from .subspace import RankDeficientError, ReducedProblem, compute_bounds

logger = logging.getLogger(__name__)

VARIANTS = {
    "gaussian": ("gaussian",),
    "hash": ("hash",),
    "pls": ("pls",),
    "pls+gaussian": ("pls", "gaussian"),
    "mgp": ("mgp",),
    "mgp+gaussian": ("mgp", "gaussian"),
}

CSV_HEADER = ["eval_index", "outer_iter", "method", "used_map", "f_value",
              "best_so_far", "wall_clock_s"]


@dataclass(frozen=True)
class EgorseConfig:
    d: int
    d_e: int = 2
    methods: tuple = ("pls", "gaussian")
    max_nb_it: int = 10
    budget_per_subspace: Optional[int] = None
    initial_doe_size: Optional[int] = None
    seed: int = 0
    gp: gpmod.GpConfig = gpmod.GpConfig()
    acquisition: cbo.AcquisitionSettings = cbo.AcquisitionSettings()
    mgp: embeddings.MgpConfig = embeddings.MgpConfig()
    inner_seeding: str = "fresh"
    share_within_iteration: bool = False

    def __post_init__(self):
        if self.budget_per_subspace is None:
            object.__setattr__(self, "budget_per_subspace", 20 * self.d_e)
        if self.initial_doe_size is None:
            object.__setattr__(self, "initial_doe_size", self.d)
        object.__setattr__(self, "methods", tuple(self.methods))
        if not 1 <= self.d_e < self.d:
            raise ValueError(f"need 1 <= d_e < d, got d_e={self.d_e}, d={self.d}")
        if len(self.methods) < 1:
            raise ValueError("at least one embedding method is required")
        for m in self.methods:
            if m not in embeddings.METHODS:
                raise ValueError(f"unknown embedding method {m!r}")
        if self.budget_per_subspace < self.d_e + 3:
            raise ValueError("budget_per_subspace must be at least d_e + 3")
        if self.initial_doe_size < 2:
            raise ValueError("initial_doe_size must be at least 2")
        if self.max_nb_it < 0:
            raise ValueError("max_nb_it must be non-negative")
        if self.inner_seeding not in ("fresh", "projected"):
            raise ValueError("inner_seeding must be 'fresh' or 'projected'")

    @property
    def T(self):
        return len(self.methods)

    @property
    def total_evaluations(self):
        return self.initial_doe_size + self.max_nb_it * self.T * self.budget_per_subspace


class Record(NamedTuple):
    evaluation_index: int
    full_point: np.ndarray
    f_value: float
    wall_clock_seconds: float
    outer_iteration: int
    method_tag: str
    used_map: str
    flags: tuple = ()


@dataclass
class History:
    records: list = field(default_factory=list)
    gp_input_dims: set = field(default_factory=set)
    transfer_matrices: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, **kw):
        kw.setdefault("flags", ())
        self.records.append(Record(evaluation_index=len(self.records), **kw))

    @property
    def f_values(self):
        return np.array([r.f_value for r in self.records])

    @property
    def best_trace(self):
        v = self.f_values
        return np.minimum.accumulate(np.where(np.isfinite(v), v, np.inf))

    @property
    def points(self):
        return np.array([r.full_point for r in self.records])

    def to_csv(self, path=None, timing=True):
        """CSV text (also written to ``path`` when given), 17 significant digits."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r, best in zip(self.records, self.best_trace):
            w.writerow([r.evaluation_index, r.outer_iteration, r.method_tag, r.used_map,
                        f"{r.f_value:.17g}", f"{best:.17g}",
                        f"{r.wall_clock_seconds:.17g}" if timing else "0"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def read_history_csv(path):
    """Columns of a history CSV as a dict of numpy arrays / lists."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    body = rows[1:]
    return {
        "eval_index": np.array([int(r[0]) for r in body]),
        "outer_iter": np.array([int(r[1]) for r in body]),
        "method": [r[2] for r in body],
        "used_map": [r[3] for r in body],
        "f_value": np.array([float(r[4]) for r in body]),
        "best_so_far": np.array([float(r[5]) for r in body]),
        "wall_clock_s": np.array([float(r[6]) for r in body]),
    }


def best_point(history):
    """Point and value of the lowest record (earliest on ties)."""
    if not history.records:
        raise ValueError("history is empty")
    vals = np.where(np.isfinite(history.f_values), history.f_values, np.inf)
    i = int(np.argmin(vals))
    return history.records[i].full_point, history.records[i].f_value


def _build(method, config, archive_X, archive_y, rng):
    """Transfer matrix for one slot; supervised failures fall back to Gaussian."""
    finite = np.isfinite(archive_y)
    try:
        tm = embeddings.build_transfer(
            method, config.d, config.d_e, rng,
            X=archive_X[finite], y=archive_y[finite], mgp_config=config.mgp,
        )
        return tm, compute_bounds(tm), ()
    except (embeddings.EmbeddingError, RankDeficientError, np.linalg.LinAlgError) as exc:
        logger.info("%s embedding failed (%s); using a Gaussian matrix", method, exc)
        for _ in range(100):
            tm = embeddings.gaussian_embedding(config.d, config.d_e, rng)
            try:
                return tm, compute_bounds(tm), (f"{method}-fallback",)
            except RankDeficientError:
                continue
        raise


def run_egorse(f, config, rng=None):
    """Minimize ``f`` over ``[-1, 1]^d``.

    Parameters
    ----------
    f : callable
        Full-space objective taking a length-``d`` array.
    config : EgorseConfig
    rng : numpy.random.Generator, optional
        Defaults to ``default_rng(config.seed)``.

    Returns
    -------
    History
        Exactly ``config.total_evaluations`` records.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    hist = History()
    d = config.d
    X0 = latin_hypercube(config.initial_doe_size, -np.ones(d), np.ones(d), rng)
    for x in X0:
        y = float(f(x))
        hist.append(full_point=x, f_value=y, wall_clock_seconds=time.perf_counter() - t0,
                    outer_iteration=-1, method_tag="doe", used_map="none",
                    flags=() if np.isfinite(y) else ("non-finite",))
    archive_X = np.array(X0)
    archive_y = hist.f_values.copy()

    for i in range(config.max_nb_it):
        new_X, new_y = [], []
        for method in config.methods:
            if config.share_within_iteration and new_X:
                X_src = np.vstack([archive_X, new_X])
                y_src = np.concatenate([archive_y, new_y])
            else:
                X_src, y_src = archive_X, archive_y
            tm, sub, flags = _build(method, config, X_src, y_src, rng)
            hist.transfer_matrices.append(tm)
            seeds = None
            if config.inner_seeding == "projected":
                order = np.argsort(np.where(np.isfinite(y_src), y_src, np.inf))
                seeds = X_src[order[: config.d_e + 2]] @ sub.A.T
            run = cbo.run_cbo(ReducedProblem(sub, f), config.budget_per_subspace,
                              config.acquisition, config.gp, rng, seed_points=seeds)
            hist.gp_input_dims.update(run.gp_input_dims)
            for k in range(run.evaluations_used):
                hist.append(full_point=run.full_points[k], f_value=run.objective_values[k],
                            wall_clock_seconds=time.perf_counter() - t0,
                            outer_iteration=i, method_tag=tm.method_tag,
                            used_map=run.used_maps[k], flags=flags + tuple(run.flags[k]))
            new_X.extend(run.full_points)
            new_y.extend(run.objective_values)
        archive_X = np.vstack([archive_X, new_X])
        archive_y = np.concatenate([archive_y, new_y])
        logger.info("outer iteration %d done, best %.6g", i, np.min(hist.best_trace))
    return hist
