"""Transfer matrices from the full design space to a reduced space.

Every builder returns a :class:`TransferMatrix` of shape ``(d_e, d)``: a
reduced point is ``u = A @ x``. Two builders are unsupervised (Gaussian,
hash) and two learn from evaluated data (PLS, MGP).
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from . import gp as gpmod

logger = logging.getLogger(__name__)

METHODS = ("gaussian", "hash", "pls", "mgp")
SUPERVISED = frozenset({"pls", "mgp"})
RANK_TOL = 1e-10


class EmbeddingError(ValueError):
    """A supervised builder cannot produce a direction from the data."""


@dataclass(frozen=True)
class TransferMatrix:
    entries: np.ndarray
    method_tag: str
    seed: Optional[int] = None
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.entries, dtype=float))
        if self.method_tag not in METHODS:
            raise ValueError(f"unknown method tag {self.method_tag!r}")
        d_e, d = A.shape
        if not 1 <= d_e < d:
            raise ValueError(f"need 1 <= d_e < d, got d_e={d_e}, d={d}")
        if not np.all(np.isfinite(A)):
            raise ValueError("transfer matrix has non-finite entries")
        if np.any(np.all(A == 0, axis=1)):
            raise ValueError("transfer matrix has an all-zero row")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)

    @property
    def d(self):
        return self.entries.shape[1]

    @property
    def d_e(self):
        return self.entries.shape[0]

    def to_text(self):
        seed = -1 if self.seed is None else int(self.seed)
        lines = [f"{self.d_e} {self.d} {self.method_tag} {seed}"]
        lines += [" ".join(f"{v:.17g}" for v in row) for row in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        if not rows or len(rows[0]) != 4:
            raise ValueError("header must read 'd_e d method_tag seed'")
        d_e, d, tag, seed = int(rows[0][0]), int(rows[0][1]), rows[0][2], int(rows[0][3])
        body = np.array([[float(v) for v in r] for r in rows[1:]])
        if body.shape != (d_e, d):
            raise ValueError(f"header announces {d_e}x{d}, body is {body.shape}")
        return cls(body, tag, None if seed < 0 else seed)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def _check_dims(d, d_e):
    if not 1 <= d_e < d:
        raise ValueError(f"need 1 <= d_e < d, got d_e={d_e}, d={d}")


def gaussian_embedding(d, d_e, rng, seed=None):
    """I.i.d. standard normal entries."""
    _check_dims(d, d_e)
    return TransferMatrix(rng.standard_normal((d_e, d)), "gaussian", seed)


def hash_embedding(d, d_e, rng, seed=None):
    """Signed indicator matrix: each column has a single +-1 entry.

    Row assignments are redrawn until every row owns at least one column.
    """
    _check_dims(d, d_e)
    while True:
        rows = rng.integers(0, d_e, size=d)
        if np.unique(rows).size == d_e:
            break
    signs = rng.choice([-1.0, 1.0], size=d)
    A = np.zeros((d_e, d))
    A[rows, np.arange(d)] = signs
    return TransferMatrix(A, "hash", seed)


@dataclass
class PlsState:
    """Quantities accumulated by the NIPALS recursion (rows are samples)."""

    residual_inputs: np.ndarray
    residual_outputs: np.ndarray
    directions: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    x_loadings: list = field(default_factory=list)
    y_loadings: list = field(default_factory=list)

    @property
    def n_components(self):
        return len(self.directions)


def pls_state(X, y, n_components):
    """Run up to ``n_components`` NIPALS steps on centered data.

    Stops early when the residual input/output covariance vanishes.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    state = PlsState(X - X.mean(axis=0), y - y.mean())
    for _ in range(n_components):
        Xi, yi = state.residual_inputs, state.residual_outputs
        w = Xi.T @ yi
        norm = np.linalg.norm(w)
        scale = max(1.0, np.linalg.norm(Xi) * np.linalg.norm(yi))
        if norm < 1e-14 * scale:
            break
        a = w / norm
        t = Xi @ a
        tt = t @ t
        p = Xi.T @ t / tt
        c = yi @ t / tt
        state.directions.append(a)
        state.scores.append(t)
        state.x_loadings.append(p)
        state.y_loadings.append(c)
        state.residual_inputs = Xi - np.outer(t, p)
        state.residual_outputs = yi - c * t
    return state


def pls_objective(X, y, a):
    """Squared input/output covariance along unit direction(s) ``a``."""
    return (np.asarray(a) @ (X.T @ y)) ** 2


def pls_embedding(X, y, d_e, rng=None, seed=None):
    """Supervised matrix from partial least squares.

    The rows of the result are the columns of ``A' (P^T A')^{-1}``, i.e. the
    rotations mapping centered inputs onto the PLS scores. If the recursion
    stops before ``d_e`` components the remaining rows are Gaussian and the
    matrix is flagged ``padded``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    d = X.shape[1]
    _check_dims(d, d_e)
    if X.shape[0] < d_e + 1:
        raise EmbeddingError(f"PLS needs at least {d_e + 1} points, got {X.shape[0]}")
    if np.ptp(y) == 0:
        raise EmbeddingError("outputs are constant; no supervised direction exists")
    state = pls_state(X, y, d_e)
    k = state.n_components
    if k == 0:
        raise EmbeddingError("inputs and outputs are uncorrelated")
    Ap = np.column_stack(state.directions)
    P = np.column_stack(state.x_loadings)
    rotations = Ap @ np.linalg.inv(P.T @ Ap)
    A = rotations.T
    info = {"padded": False}
    if k < d_e:
        if rng is None:
            rng = np.random.default_rng(0)
        A = np.vstack([A, rng.standard_normal((d_e - k, d))])
        info = {"padded": True, "components": k}
        logger.info("PLS stopped after %d of %d components; padded", k, d_e)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= RANK_TOL * sv[0]:
        raise EmbeddingError("PLS transfer matrix is rank deficient")
    return TransferMatrix(A, "pls", seed, info)


@dataclass(frozen=True)
class MgpConfig:
    """Settings for the MAP transfer matrix.

    ``prior_mean`` of None means a PLS matrix when it can be built, else a
    Gaussian draw. ``refit_every=0`` keeps unit lengthscales fixed.
    ``gradient`` is ``"analytic"`` or ``"fd"`` (central differences).
    """

    prior_mean: Optional[np.ndarray] = None
    prior_scale: float = 1.0
    map_iterations: int = 200
    map_tolerance: float = 1e-3
    refit_every: int = 5
    n_random_starts: int = 2
    fd_step: float = 1e-5
    max_points: int = 200
    compute_covariance: bool = False
    gp: gpmod.GpConfig = gpmod.GpConfig(n_starts=3)
    gradient: str = "analytic"

    def __post_init__(self):
        if self.gradient not in ("analytic", "fd"):
            raise ValueError("gradient must be 'analytic' or 'fd'")
        if self.prior_scale <= 0:
            raise ValueError("prior covariance scale must be positive")
        if self.map_iterations < 1 or self.map_tolerance <= 0:
            raise ValueError("map_iterations and map_tolerance must be positive")


@dataclass(frozen=True)
class MgpResult:
    map_matrix: np.ndarray
    log_posterior: float
    prior_log_posterior: float
    gradient_norm_at_map: float
    lengthscales: np.ndarray
    posterior_covariance: Optional[np.ndarray] = None
    improved: bool = True
    converged: bool = True


def mgp_log_posterior(A, X, y, lengthscales, prior_mean, prior_scale, eta=1e-8):
    """Gaussian log prior on vec(A) plus the GP likelihood of ``y`` on ``X A^T``.

    The GP mean and variance are profiled in closed form.
    """
    A = np.asarray(A, dtype=float)
    Z = X @ A.T
    sqdiff = (Z.T[:, :, None] - Z.T[:, None, :]) ** 2
    prof = gpmod._profiled(np.log(lengthscales), Z, y, sqdiff, eta, with_grad=False)
    if prof is None:
        return -np.inf
    diff = (A - prior_mean).ravel()
    log_prior = -0.5 * diff @ diff / prior_scale**2
    log_prior -= 0.5 * diff.size * np.log(2.0 * np.pi * prior_scale**2)
    return log_prior + prof.lml


def mgp_log_posterior_gradient(A, X, y, lengthscales, prior_mean, prior_scale, eta=1e-8):
    """Log posterior and its gradient with respect to ``A`` (same shape as ``A``).

    Returns ``(-inf, None)`` when the covariance cannot be factorized.
    """
    A = np.asarray(A, dtype=float)
    ls2 = np.asarray(lengthscales, dtype=float) ** 2
    Z = X @ A.T
    D = Z.T[:, :, None] - Z.T[:, None, :]
    prof = gpmod._profiled(0.5 * np.log(ls2), Z, y, D**2, eta, with_grad=False)
    if prof is None:
        return -np.inf, None
    n = y.size
    C = np.exp(-0.5 * np.tensordot(1.0 / ls2, D**2, axes=1))
    a = cho_solve((prof.L, True), y - prof.mean, check_finite=False)
    M = np.outer(a, a) / prof.variance - cho_solve((prof.L, True), np.eye(n), check_finite=False)
    W = M * C
    # dC_ij/dA_kl = -C_ij D_kij (x_il - x_jl) / l_k^2, and W * D_k is antisymmetric
    row_sums = np.einsum("ij,kij->ki", W, D)
    grad = -(row_sums @ X) / ls2[:, None]
    diff = A - prior_mean
    log_prior = -0.5 * np.sum(diff**2) / prior_scale**2
    log_prior -= 0.5 * diff.size * np.log(2.0 * np.pi * prior_scale**2)
    return log_prior + prof.lml, grad - diff / prior_scale**2


def _central_gradient(fun, z, h):
    g = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (fun(z + e) - fun(z - e)) / (2.0 * h)
    return g


def _central_hessian(fun, z, h):
    n = z.size
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[i] = (_central_gradient(fun, z + e, h) - _central_gradient(fun, z - e, h)) / (2 * h)
    return 0.5 * (H + H.T)


def _refit_lengthscales(A, X, y, gp_config, rng):
    Z = X @ A.T
    try:
        model = gpmod.fit_gp(gpmod.Doe(Z, y), gp_config, rng)
    except (gpmod.GpFitError, gpmod.DuplicatePointError, ValueError):
        return None
    return np.array(model.lengthscales)


def mgp_map(X, y, d_e, config=None, rng=None):
    """Maximum a posteriori transfer matrix with optional Laplace covariance."""
    config = config or MgpConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    _check_dims(d, d_e)
    if n < 3:
        raise EmbeddingError(f"MGP needs at least 3 points, got {n}")
    if n > config.max_points:
        keep = np.sort(rng.choice(n, size=config.max_points, replace=False))
        X, y = X[keep], y[keep]
    if config.prior_mean is not None:
        A_p = np.asarray(config.prior_mean, dtype=float)
        if A_p.shape != (d_e, d):
            raise ValueError(f"prior mean must be {d_e}x{d}")
    else:
        try:
            A_p = np.array(pls_embedding(X, y, d_e, rng).entries)
        except EmbeddingError:
            A_p = rng.standard_normal((d_e, d))
    shape = (d_e, d)
    h = config.fd_step

    def make_fun(ls):
        def neg(z):
            v = mgp_log_posterior(z.reshape(shape), X, y, ls, A_p, config.prior_scale)
            return 1e300 if not np.isfinite(v) else -v
        return neg

    def make_obj(ls):
        """Negated posterior with gradient, in the form ``minimize(jac=True)`` wants."""
        if config.gradient == "fd":
            neg = make_fun(ls)
            return lambda z: (neg(z), _central_gradient(neg, z, h))

        def obj(z):
            v, g = mgp_log_posterior_gradient(z.reshape(shape), X, y, ls, A_p,
                                              config.prior_scale)
            if not np.isfinite(v):
                return 1e300, np.zeros_like(z)
            return -v, -g.ravel()
        return obj

    def ascend(A0):
        z = A0.ravel().copy()
        ls = np.ones(d_e)
        used = 0
        if config.refit_every > 0:
            while used < config.map_iterations:
                new_ls = _refit_lengthscales(z.reshape(shape), X, y, config.gp, rng)
                if new_ls is not None:
                    ls = new_ls
                obj = make_obj(ls)
                res = minimize(obj, z, jac=True, method="L-BFGS-B",
                               options={"maxiter": config.refit_every})
                used += max(res.nit, 1)
                moved = np.linalg.norm(res.x - z)
                z = res.x
                v, g = obj(z)
                if np.linalg.norm(g) <= config.map_tolerance * (1 + abs(v)) and moved < 1e-8:
                    break
        # polish with the last lengthscales frozen so the returned point is
        # stationary for a fixed objective
        obj = make_obj(ls)
        res = minimize(obj, z, jac=True, method="BFGS",
                       options={"maxiter": config.map_iterations, "gtol": 1e-8})
        z = res.x if res.fun <= obj(z)[0] else z
        return z, ls

    starts = [A_p] + [rng.standard_normal(shape) for _ in range(config.n_random_starts)]
    best = None
    for A0 in starts:
        z, ls = ascend(A0)
        val = -make_fun(ls)(z)
        if best is None or val > best[1]:
            best = (z, val, ls)
    z, val, ls = best
    neg = make_fun(ls)
    prior_val = -neg(A_p.ravel())
    improved = val >= prior_val
    if not improved:
        warnings.warn("MGP ascent did not improve on the prior mean; returning it")
        z, val = A_p.ravel().copy(), prior_val
    grad_norm = float(np.linalg.norm(make_obj(ls)(z)[1]))
    cov = None
    if config.compute_covariance:
        H = _central_hessian(lambda w: -neg(w), z, 1e-4)
        try:
            cov = np.linalg.inv(-H)
        except np.linalg.LinAlgError:
            cov = None
    converged = grad_norm <= config.map_tolerance * (1.0 + abs(val))
    if not converged:
        logger.info("MGP ascent stopped with gradient norm %.3g", grad_norm)
    return MgpResult(z.reshape(shape), float(val), float(prior_val), grad_norm,
                     ls, cov, improved, converged)


def mgp_embedding(X, y, d_e, config=None, rng=None, seed=None):
    result = mgp_map(X, y, d_e, config, rng)
    info = {"log_posterior": result.log_posterior, "improved": result.improved,
            "gradient_norm": result.gradient_norm_at_map, "converged": result.converged}
    return TransferMatrix(result.map_matrix, "mgp", seed, info)


def build_transfer(method, d, d_e, rng, X=None, y=None, mgp_config=None, seed=None):
    """Dispatch on ``method``; supervised methods require ``X`` and ``y``."""
    if method == "gaussian":
        return gaussian_embedding(d, d_e, rng, seed)
    if method == "hash":
        return hash_embedding(d, d_e, rng, seed)
    if method in SUPERVISED and (X is None or y is None):
        raise EmbeddingError(f"{method} needs evaluated data")
    if method == "pls":
        return pls_embedding(X, y, d_e, rng, seed)
    if method == "mgp":
        return mgp_embedding(X, y, d_e, mgp_config, rng, seed)
    raise ValueError(f"unknown embedding method {method!r}")
