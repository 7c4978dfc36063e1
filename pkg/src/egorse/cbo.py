"""Constrained Bayesian optimization inside a reduced box.

The objective surrogate drives expected improvement; a second GP models the
feasibility constraint and only its posterior mean is used (a candidate is
predicted feasible when that mean is >= 0).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import gp as gpmod
from .sampling import latin_hypercube

logger = logging.getLogger(__name__)

SIGMA_GUARD = 1e-12
NEAR_DUPLICATE = 1e-8


def ei_from_moments(mean, std, y_min, guard=0.0):
    """Vectorized expected improvement; zero wherever ``std <= guard``."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    out = np.zeros(np.broadcast(mean, std).shape)
    ok = std > guard
    if np.any(ok):
        s = np.broadcast_to(std, out.shape)[ok]
        gap = y_min - np.broadcast_to(mean, out.shape)[ok]
        z = gap / s
        out[ok] = gap * norm.cdf(z) + s * norm.pdf(z)
    return np.maximum(out, 0.0)


def _guard(model):
    return SIGMA_GUARD * np.sqrt(model.kernel_variance)


def expected_improvement(model, u, y_min):
    mean, std = gpmod.predict(model, u)
    return float(ei_from_moments(mean, std, y_min, _guard(model)))


def expected_improvement_gradient(model, u, y_min):
    """EI and its gradient; the gradient is zero where EI is degenerate."""
    mean, std = gpmod.predict(model, u)
    if std <= _guard(model):
        return 0.0, np.zeros(model.dim)
    pg = gpmod.predict_gradient(model, u)
    z = (y_min - mean) / std
    ei = (y_min - mean) * norm.cdf(z) + std * norm.pdf(z)
    grad = -norm.cdf(z) * pg.grad_mean + norm.pdf(z) * pg.grad_std
    return float(max(ei, 0.0)), grad


@dataclass(frozen=True)
class AcquisitionSettings:
    global_population: int = 30
    global_generations: int = 25
    local_refine_steps: int = 30
    differential_weight: float = 0.7
    crossover: float = 0.9

    def __post_init__(self):
        for name in ("global_population", "global_generations", "local_refine_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.global_population < 4:
            raise ValueError("global_population must be at least 4")


def ranking_order(ei, cst_mean, U):
    """Indices from best to worst under feasibility-first ordering.

    Feasible candidates (constraint mean >= 0) come first, sorted by EI
    (descending) then by norm (ascending); infeasible ones follow sorted by
    their violation. Remaining ties keep index order.
    """
    ei = np.asarray(ei, dtype=float)
    cst_mean = np.asarray(cst_mean, dtype=float)
    feasible = cst_mean >= 0.0
    norms = np.linalg.norm(np.atleast_2d(U), axis=1)
    idx = np.arange(ei.size)
    primary = np.where(feasible, -ei, 0.0)
    violation = np.where(feasible, 0.0, -cst_mean)
    # lexsort: last key is the most significant
    return np.lexsort((idx, norms, violation, primary, ~feasible))


def outranks(a, b):
    """True when candidate ``a = (ei, cst_mean, norm)`` beats ``b`` strictly."""
    fa, fb = a[1] >= 0, b[1] >= 0
    if fa != fb:
        return fa
    if fa:
        return (a[0], -a[2]) > (b[0], -b[2])
    return -a[1] > -b[1]


@dataclass
class AcquisitionResult:
    point: np.ndarray
    ei: float
    constraint_mean: float
    feasible: bool
    flags: list = field(default_factory=list)


def _score(obj_gp, cst_gp, U, y_min):
    mean, std = gpmod.predict_many(obj_gp, U)
    ei = ei_from_moments(mean, std, y_min, _guard(obj_gp))
    cmean, _ = gpmod.predict_many(cst_gp, U)
    return ei, cmean, std


def optimize_acquisition(obj_gp, cst_gp, lower, upper, y_min, settings=None, rng=None):
    """Maximize EI subject to a non-negative constraint-GP mean.

    Phase one is a differential-evolution search with feasibility-first
    selection; phase two is projected gradient ascent on EI from the phase
    one winner. Returns the best candidate seen overall.
    """
    settings = settings or AcquisitionSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    P, dim = settings.global_population, lower.size
    flags = []

    pop = latin_hypercube(P, lower, upper, rng)
    ei, cm, sd = _score(obj_gp, cst_gp, pop, y_min)
    seen_U, seen_ei, seen_cm, seen_sd = [pop], [ei], [cm], [sd]
    for _ in range(settings.global_generations):
        r = np.array([rng.choice(np.delete(np.arange(P), i), 3, replace=False) for i in range(P)])
        mutant = pop[r[:, 0]] + settings.differential_weight * (pop[r[:, 1]] - pop[r[:, 2]])
        cross = rng.random((P, dim)) < settings.crossover
        cross[np.arange(P), rng.integers(0, dim, P)] = True
        trial = np.clip(np.where(cross, mutant, pop), lower, upper)
        t_ei, t_cm, t_sd = _score(obj_gp, cst_gp, trial, y_min)
        t_norm = np.linalg.norm(trial, axis=1)
        p_norm = np.linalg.norm(pop, axis=1)
        better = np.array([
            outranks((t_ei[i], t_cm[i], t_norm[i]), (ei[i], cm[i], p_norm[i]))
            for i in range(P)
        ])
        pop = np.where(better[:, None], trial, pop)
        ei = np.where(better, t_ei, ei)
        cm = np.where(better, t_cm, cm)
        sd = np.where(better, t_sd, sd)
        seen_U.append(trial)
        seen_ei.append(t_ei)
        seen_cm.append(t_cm)
        seen_sd.append(t_sd)

    all_U = np.vstack(seen_U)
    all_ei = np.concatenate(seen_ei)
    all_cm = np.concatenate(seen_cm)
    all_sd = np.concatenate(seen_sd)
    any_feasible = bool(np.any(all_cm >= 0))
    if any_feasible and not np.any(all_ei[all_cm >= 0] > 0):
        # EI vanishes on every sampled feasible point: explore instead
        mask = all_cm >= 0
        j = np.flatnonzero(mask)[np.argmax(all_sd[mask])]
        flags.append("ei-degenerate")
        return AcquisitionResult(all_U[j].copy(), 0.0, float(all_cm[j]), True, flags)

    best_i = ranking_order(all_ei, all_cm, all_U)[0]
    u = all_U[best_i].copy()
    cur = (float(all_ei[best_i]), float(all_cm[best_i]), float(np.linalg.norm(u)))
    if cur[1] >= 0:
        u, cur = _refine(obj_gp, cst_gp, u, cur, lower, upper, y_min, settings)
    if cur[1] < 0:
        flags.append("no-feasible-candidate")
    return AcquisitionResult(u, cur[0], cur[1], cur[1] >= 0, flags)


def _refine(obj_gp, cst_gp, u, cur, lower, upper, y_min, settings):
    width = float(np.max(upper - lower))
    step = 0.05 * width
    for _ in range(settings.local_refine_steps):
        _, grad = expected_improvement_gradient(obj_gp, u, y_min)
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-8:
            break
        accepted = False
        while step > 1e-10 * width:
            cand = np.clip(u + step * grad / gnorm, lower, upper)
            ei, cm, _ = _score(obj_gp, cst_gp, cand[None, :], y_min)
            new = (float(ei[0]), float(cm[0]), float(np.linalg.norm(cand)))
            if outranks(new, cur):
                u, cur = cand, new
                step *= 2.0
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return u, cur


@dataclass
class SubspaceRun:
    """Bookkeeping of one inner optimization."""

    lower: np.ndarray
    upper: np.ndarray
    budget: int
    inner_points: list = field(default_factory=list)
    objective_values: list = field(default_factory=list)
    constraint_values: list = field(default_factory=list)
    full_points: list = field(default_factory=list)
    used_maps: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    gp_input_dims: set = field(default_factory=set)
    subspace: Optional[object] = None

    @property
    def evaluations_used(self):
        return len(self.objective_values)

    @property
    def inner_doe(self):
        return gpmod.Doe(np.array(self.inner_points), np.array(self.objective_values))

    @property
    def best_trace(self):
        vals = np.where(np.isfinite(self.objective_values), self.objective_values, np.inf)
        return np.minimum.accumulate(vals)

    def record(self, u, ev):
        if self.evaluations_used >= self.budget:
            raise RuntimeError("subspace budget exhausted")
        self.inner_points.append(np.asarray(u, dtype=float))
        self.objective_values.append(ev.value)
        self.constraint_values.append(ev.constraint)
        self.full_points.append(ev.full_point)
        self.used_maps.append(ev.used_map)
        flags = []
        if not ev.finite:
            flags.append("non-finite")
        if ev.projected:
            flags.append("projected")
        self.flags.append(flags)


def _training_values(values):
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    if not np.all(finite):
        fill = np.max(v[finite]) if np.any(finite) else 0.0
        v = np.where(finite, v, fill)
    return v


def _is_near(point, points, tol):
    if not len(points):
        return False
    return bool(np.min(np.linalg.norm(np.asarray(points) - point, axis=1)) <= tol)


def run_cbo(problem, budget, settings=None, gp_config=None, rng=None, seed_points=None):
    """Spend ``budget`` expensive evaluations on ``problem``.

    ``problem`` exposes ``lower``, ``upper`` and ``evaluate(u)`` returning a
    :class:`~egorse.subspace.ReducedEvaluation`. The first ``d_e + 2``
    evaluations form a Latin hypercube (or use ``seed_points`` when given).
    Surrogates are trained on coordinates rescaled to ``[-1, 1]^d_e``.
    """
    settings = settings or AcquisitionSettings()
    gp_config = gp_config or gpmod.GpConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    lower = np.asarray(problem.lower, dtype=float)
    upper = np.asarray(problem.upper, dtype=float)
    dim = lower.size
    n0 = dim + 2
    if budget < n0:
        raise ValueError(f"budget {budget} smaller than the {n0}-point seed design")
    center, half = 0.5 * (upper + lower), 0.5 * (upper - lower)
    to_unit = lambda u: (u - center) / half  # noqa: E731
    from_unit = lambda s: center + half * s  # noqa: E731
    unit_lo, unit_hi = -np.ones(dim), np.ones(dim)

    run = SubspaceRun(lower, upper, budget, subspace=getattr(problem, "subspace", None))
    if seed_points is None:
        seeds = latin_hypercube(n0, unit_lo, unit_hi, rng)
    else:
        seeds = np.clip(to_unit(np.atleast_2d(seed_points)), -1, 1)[:n0]
        if len(seeds) < n0:
            seeds = np.vstack([seeds, latin_hypercube(n0 - len(seeds), unit_lo, unit_hi, rng)])
    unit_points = []
    for s in seeds:
        run.record(from_unit(s), problem.evaluate(from_unit(s)))
        unit_points.append(s)

    while run.evaluations_used < budget:
        S = np.array(unit_points)
        f_vals = _training_values(run.objective_values)
        g_vals = np.asarray(run.constraint_values, dtype=float)
        step_flags = []
        try:
            obj_gp = gpmod.fit_gp(gpmod.Doe(S, f_vals), gp_config, rng)
            cst_gp = gpmod.fit_gp(gpmod.Doe(S, g_vals), gp_config, rng)
            run.gp_input_dims.update({obj_gp.dim, cst_gp.dim})
            acq = optimize_acquisition(obj_gp, cst_gp, unit_lo, unit_hi, float(np.min(f_vals)),
                                       settings, rng)
            s_new = acq.point
            step_flags += acq.flags
        except (gpmod.GpFitError, gpmod.DuplicatePointError) as exc:
            logger.warning("surrogate fit failed (%s); sampling at random", exc)
            s_new = latin_hypercube(1, unit_lo, unit_hi, rng)[0]
            step_flags.append("random-fallback")
        if _is_near(s_new, unit_points, NEAR_DUPLICATE):
            s_new = latin_hypercube(1, unit_lo, unit_hi, rng)[0]
            step_flags.append("duplicate-replaced")
        u_new = from_unit(s_new)
        run.record(u_new, problem.evaluate(u_new))
        run.flags[-1].extend(step_flags)
        unit_points.append(s_new)
    return run
