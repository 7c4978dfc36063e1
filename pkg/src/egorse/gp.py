"""Gaussian process regression with an anisotropic squared-exponential kernel.

The kernel is

    k(x, x') = s2 * exp(-0.5 * sum_j ((x_j - x'_j) / l_j) ** 2)

with a constant prior mean estimated by generalized least squares. For a
given set of lengthscales the mean and the variance ``s2`` have closed-form
maximum-likelihood values, so the multi-start search only runs over the
lengthscales (in log space).
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .sampling import latin_hypercube

LOG_2PI = np.log(2.0 * np.pi)
DUPLICATE_DISTANCE = 1e-12


class GpFitError(RuntimeError):
    """Covariance stays non positive definite even at the largest nugget."""


class DuplicatePointError(ValueError):
    """A point lies within ``DUPLICATE_DISTANCE`` of an existing one."""


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Doe:
    """Evaluated points (one per row) and their outputs."""

    points: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        outputs = np.atleast_1d(np.asarray(self.outputs, dtype=float)).ravel()
        if points.shape[1] < 1:
            raise ValueError("points must have dimension >= 1")
        if points.shape[0] != outputs.shape[0]:
            raise ValueError(
                f"{points.shape[0]} points but {outputs.shape[0]} outputs"
            )
        if points.shape[0] > 1:
            sq = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
            iu = np.triu_indices(points.shape[0], k=1)
            close = sq[iu] <= DUPLICATE_DISTANCE**2
            if np.any(close):
                i, j = iu[0][close][0], iu[1][close][0]
                raise DuplicatePointError(f"points {i} and {j} coincide")
        object.__setattr__(self, "points", _freeze(points))
        object.__setattr__(self, "outputs", _freeze(outputs))

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def y_min(self):
        return float(np.min(self.outputs))

    def contains(self, x, tol=DUPLICATE_DISTANCE):
        x = np.asarray(x, dtype=float)
        return bool(np.any(np.linalg.norm(self.points - x, axis=1) <= tol))

    def append(self, x, y):
        """Return a new Doe with ``(x, y)`` added; duplicates are rejected."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.dim:
            raise ValueError(f"point has dimension {x.size}, expected {self.dim}")
        if self.contains(x):
            raise DuplicatePointError("point already in the design")
        return Doe(np.vstack([self.points, x]), np.append(self.outputs, float(y)))


@dataclass(frozen=True)
class GpConfig:
    n_starts: int = 10
    lengthscale_bounds: tuple = (1e-3, 1e3)
    nugget: float = 1e-8
    max_nugget: float = 1e-4
    maxiter: int = 100

    def __post_init__(self):
        lo, hi = self.lengthscale_bounds
        if not 0 < lo < hi:
            raise ValueError("lengthscale bounds must satisfy 0 < lo < hi")
        if self.n_starts < 1:
            raise ValueError("n_starts must be positive")
        if not 0 < self.nugget <= self.max_nugget:
            raise ValueError("need 0 < nugget <= max_nugget")


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel hyperparameters; ``nugget`` is absolute, ``mean=None`` means GLS."""

    lengthscales: np.ndarray
    variance: float
    nugget: float = 0.0
    mean: Optional[float] = None


@dataclass(frozen=True)
class GpModel:
    lengthscales: np.ndarray
    kernel_variance: float
    nugget: float
    prior_mean_value: float
    training_doe: Doe
    chol_factor: np.ndarray
    alpha: np.ndarray
    fit_info: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def dim(self):
        return self.training_doe.dim

    @property
    def hyperparams(self):
        return GpHyperparams(
            self.lengthscales, self.kernel_variance, self.nugget, self.prior_mean_value
        )


class PredictionGradient(NamedTuple):
    grad_mean: np.ndarray
    grad_std: np.ndarray
    degenerate: bool


def correlation(X1, X2, lengthscales):
    """Unit-variance squared-exponential correlation between two point sets."""
    Z1 = np.asarray(X1, dtype=float) / lengthscales
    Z2 = np.asarray(X2, dtype=float) / lengthscales
    sq = (
        np.sum(Z1**2, axis=1)[:, None]
        + np.sum(Z2**2, axis=1)[None, :]
        - 2.0 * Z1 @ Z2.T
    )
    return np.exp(-0.5 * np.maximum(sq, 0.0))


def _gls_mean(L, y):
    ones = np.ones_like(y)
    r_one = cho_solve((L, True), ones, check_finite=False)
    r_y = cho_solve((L, True), y, check_finite=False)
    return float(ones @ r_y / (ones @ r_one))


def log_marginal_likelihood(hyperparams, doe):
    """Exact GP log marginal likelihood of ``doe`` under ``hyperparams``.

    Returns ``-inf`` when the covariance cannot be factorized.
    """
    ls = np.asarray(hyperparams.lengthscales, dtype=float)
    if np.any(ls <= 0) or hyperparams.variance <= 0 or hyperparams.nugget < 0:
        raise ValueError("hyperparameters must be positive")
    X, y = doe.points, doe.outputs
    n = y.size
    K = hyperparams.variance * correlation(X, X, ls) + hyperparams.nugget * np.eye(n)
    try:
        L = cholesky(K, lower=True, check_finite=False)
    except LinAlgError:
        return -np.inf
    if np.any(np.diag(L) <= 0):
        return -np.inf
    mu = _gls_mean(L, y) if hyperparams.mean is None else float(hyperparams.mean)
    w = solve_triangular(L, y - mu, lower=True, check_finite=False)
    return float(-0.5 * w @ w - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI)


class _Profile(NamedTuple):
    lml: float
    grad: np.ndarray
    mean: float
    variance: float
    L: np.ndarray


def _variance_floor(y):
    return 1e-12 * max(1.0, float(np.mean(y**2)))


def _profiled(log_ls, X, y, sqdiff, eta, with_grad=True):
    """Likelihood with mean and variance at their closed-form optimum.

    ``sqdiff[j]`` holds the pairwise squared differences along input ``j``.
    """
    n = y.size
    ls2 = np.exp(2.0 * log_ls)
    C = np.exp(-0.5 * np.tensordot(1.0 / ls2, sqdiff, axes=1))
    R = C + eta * np.eye(n)
    try:
        L = cholesky(R, lower=True, check_finite=False)
    except LinAlgError:
        return None
    mu = _gls_mean(L, y)
    a = cho_solve((L, True), y - mu, check_finite=False)
    s2 = max(float((y - mu) @ a) / n, _variance_floor(y))
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    lml = -0.5 * float((y - mu) @ a) / s2 - 0.5 * n * np.log(s2) - 0.5 * logdet
    lml -= 0.5 * n * LOG_2PI
    grad = None
    if with_grad:
        M = np.outer(a, a) / s2 - cho_solve((L, True), np.eye(n), check_finite=False)
        MC = M * C
        grad = 0.5 * np.tensordot(sqdiff, MC, axes=([1, 2], [0, 1])) / ls2
    return _Profile(lml, grad, mu, s2, L)


def _start_points(X, config, rng):
    lo, hi = np.log(config.lengthscale_bounds)
    span = np.ptp(X, axis=0)
    span = np.where(span > 0, span, 1.0)
    s_lo = np.clip(np.log(0.05 * span), lo, hi)
    s_hi = np.clip(np.log(5.0 * span), lo, hi)
    starts = [np.clip(np.log(0.5 * span), lo, hi)]
    if config.n_starts > 1:
        starts.extend(latin_hypercube(config.n_starts - 1, s_lo, s_hi, rng))
    return starts


def fit_gp(doe, config=None, rng=None):
    """Fit lengthscales by multi-start maximum likelihood.

    Parameters
    ----------
    doe : Doe
        Training data, at least two points with finite outputs.
    config : GpConfig, optional
    rng : numpy.random.Generator, optional
        Drives the multi-start design. Defaults to a fixed seed so that the
        fit is reproducible.

    Returns
    -------
    GpModel
        The candidate with the highest likelihood among all local searches;
        ties go to the lowest start index.
    """
    config = config or GpConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    if len(doe) < 2:
        raise ValueError("fit_gp needs at least two points")
    X, y = doe.points, doe.outputs
    if not np.all(np.isfinite(y)):
        raise ValueError("training outputs must be finite")
    sqdiff = (X.T[:, :, None] - X.T[:, None, :]) ** 2
    bounds = [tuple(np.log(config.lengthscale_bounds))] * X.shape[1]
    starts = _start_points(X, config, rng)

    eta = config.nugget
    while eta <= config.max_nugget * (1 + 1e-9):
        best = None
        start_lml, final_lml = [], []
        for x0 in starts:
            prof0 = _profiled(x0, X, y, sqdiff, eta, with_grad=False)
            start_lml.append(-np.inf if prof0 is None else prof0.lml)

            def objective(z):
                prof = _profiled(z, X, y, sqdiff, eta)
                if prof is None:
                    return 1e300, np.zeros_like(z)
                return -prof.lml, -prof.grad

            res = minimize(
                objective,
                x0,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": config.maxiter},
            )
            cand = res.x
            prof = _profiled(cand, X, y, sqdiff, eta, with_grad=False)
            if prof is None or (prof0 is not None and prof0.lml > prof.lml):
                cand, prof = x0, prof0
            final_lml.append(-np.inf if prof is None else prof.lml)
            if prof is not None and (best is None or prof.lml > best[1].lml):
                best = (cand, prof)
        if best is not None:
            log_ls, prof = best
            info = {
                "start_lml": start_lml,
                "final_lml": final_lml,
                "relative_nugget": eta,
                "lml": prof.lml,
            }
            return _assemble(doe, np.exp(log_ls), prof, eta, info)
        eta *= 10.0
    raise GpFitError(
        f"covariance not positive definite with nugget up to {config.max_nugget:g}; "
        "the design probably contains (near) duplicate points"
    )


def _assemble(doe, lengthscales, prof, eta, info):
    s2 = prof.variance
    y = doe.outputs
    chol = np.sqrt(s2) * prof.L
    alpha = cho_solve((prof.L, True), y - prof.mean, check_finite=False) / s2
    return GpModel(
        lengthscales=_freeze(lengthscales),
        kernel_variance=float(s2),
        nugget=float(eta * s2),
        prior_mean_value=float(prof.mean),
        training_doe=doe,
        chol_factor=_freeze(chol),
        alpha=_freeze(alpha),
        fit_info=info,
    )


def model_from_hyperparams(doe, hyperparams):
    """Condition a GP on ``doe`` with fixed hyperparameters (no search)."""
    ls = np.asarray(hyperparams.lengthscales, dtype=float)
    X, y = doe.points, doe.outputs
    K = hyperparams.variance * correlation(X, X, ls) + hyperparams.nugget * np.eye(y.size)
    L = cholesky(K, lower=True, check_finite=False)
    mu = _gls_mean(L, y) if hyperparams.mean is None else float(hyperparams.mean)
    alpha = cho_solve((L, True), y - mu, check_finite=False)
    return GpModel(
        lengthscales=_freeze(ls),
        kernel_variance=float(hyperparams.variance),
        nugget=float(hyperparams.nugget),
        prior_mean_value=mu,
        training_doe=doe,
        chol_factor=_freeze(L),
        alpha=_freeze(alpha),
    )


def _check_dim(model, U):
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[1] != model.dim:
        raise ValueError(f"query has dimension {U.shape[1]}, model expects {model.dim}")
    return U


def predict_many(model, U):
    """Posterior mean and standard deviation at each row of ``U``."""
    U = _check_dim(model, U)
    k = model.kernel_variance * correlation(U, model.training_doe.points, model.lengthscales)
    mean = model.prior_mean_value + k @ model.alpha
    v = solve_triangular(model.chol_factor, k.T, lower=True, check_finite=False)
    var = model.kernel_variance - np.sum(v**2, axis=0)
    return mean, np.sqrt(np.maximum(var, 0.0))


def predict(model, u):
    u = np.asarray(u, dtype=float).ravel()
    mean, std = predict_many(model, u[None, :])
    return float(mean[0]), float(std[0])


def predict_gradient(model, u):
    """Analytic gradients of the posterior mean and standard deviation."""
    u = _check_dim(model, np.asarray(u, dtype=float).ravel()[None, :])[0]
    X = model.training_doe.points
    ls2 = model.lengthscales**2
    k = model.kernel_variance * correlation(u[None, :], X, model.lengthscales)[0]
    # dk_i/du = -k_i (u - x_i) / l^2
    J = -(k[:, None] * (u[None, :] - X)) / ls2
    grad_mean = J.T @ model.alpha
    L = model.chol_factor
    kinv_k = cho_solve((L, True), k, check_finite=False)
    var = model.kernel_variance - k @ kinv_k
    std = np.sqrt(max(var, 0.0))
    if std <= 0.0:
        return PredictionGradient(grad_mean, np.zeros_like(u), True)
    grad_var = -2.0 * J.T @ kinv_k
    return PredictionGradient(grad_mean, grad_var / (2.0 * std), False)
