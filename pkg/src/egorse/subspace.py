"""Geometry of a reduced search space.

For a transfer matrix ``A`` (d_e x d) and the design box ``[-1, 1]^d``:

* the bounding box of ``{A x}`` has half-widths ``b_i = sum_j |A_ij|``;
* a reduced point ``u`` is a *member* when some ``x`` in the box maps onto it;
* ``gamma_b`` returns, for a member, the box point with ``A x = u`` closest to
  the pseudo-inverse image ``A^+ u``;
* ``gamma_w`` clamps ``A^+ u`` to the box and is defined everywhere.
"""

import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.optimize import lsq_linear

from .embeddings import TransferMatrix


class RankDeficientError(ValueError):
    pass


class GammaBError(RuntimeError):
    """The backward map could not be computed to tolerance."""


@dataclass(frozen=True)
class Subspace:
    transfer: TransferMatrix
    pseudo_inverse: np.ndarray
    bounds: np.ndarray
    _cache: dict = field(default_factory=dict, compare=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, compare=False, repr=False)

    @property
    def A(self):
        return self.transfer.entries

    @property
    def d(self):
        return self.transfer.d

    @property
    def d_e(self):
        return self.transfer.d_e

    @property
    def row_scales(self):
        return self.bounds

    @property
    def lower(self):
        return -self.bounds

    @property
    def upper(self):
        return self.bounds

    def __getstate__(self):
        return {"transfer": self.transfer, "pseudo_inverse": self.pseudo_inverse,
                "bounds": self.bounds}

    def __setstate__(self, state):
        for k, v in state.items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "_lock", threading.Lock())


def compute_bounds(transfer):
    """Bounding box half-widths and pseudo-inverse of ``transfer``."""
    A = transfer.entries
    gram = A @ A.T
    evals, evecs = np.linalg.eigh(gram)
    if evals[0] <= 1e-12 * evals[-1]:
        combo = evecs[:, 0]
        raise RankDeficientError(
            "A A^T is singular; rows combine to ~0 with weights "
            + np.array2string(combo, precision=4)
        )
    pinv = A.T @ np.linalg.inv(gram)
    b = np.sum(np.abs(A), axis=1)
    pinv.setflags(write=False)
    b.setflags(write=False)
    return Subspace(transfer, pinv, b)


class MembershipResult(NamedTuple):
    is_member: bool
    certificate: Optional[np.ndarray]
    residual: float


def default_tolerance(d_e):
    return 1e-6 * np.sqrt(d_e)


def membership(sub, u, tol=None):
    """Decide whether ``u`` is the image of a point of ``[-1, 1]^d``.

    Solves the box-constrained least-squares problem
    ``min ||A x - u||`` with a bounded-variable active-set method; the
    residual is the distance from ``u`` to the image set.
    """
    u = np.asarray(u, dtype=float).ravel()
    tol = default_tolerance(sub.d_e) if tol is None else tol
    A = sub.A
    res = lsq_linear(A, u, bounds=(-1.0, 1.0), method="bvls", tol=1e-14)
    x = np.clip(res.x, -1.0, 1.0)
    resid = float(np.linalg.norm(A @ x - u))
    if resid > tol and res.status <= 0:
        res = lsq_linear(A, u, bounds=(-1.0, 1.0), method="trf", tol=1e-14,
                         lsmr_tol="auto", max_iter=2000)
        x2 = np.clip(res.x, -1.0, 1.0)
        r2 = float(np.linalg.norm(A @ x2 - u))
        if r2 < resid:
            x, resid = x2, r2
    member = resid <= tol
    return MembershipResult(member, x if member else None, resid)


def _affine_tol(sub, u):
    return 1e-10 + 1e-14 * float(np.max(sub.bounds))


def gamma_b(sub, u, method="newton", max_iter=None, check_member=True):
    """Box point closest to ``A^+ u`` among those with ``A x = u``.

    ``method="newton"`` maximizes the concave dual over the ``d_e``
    multipliers of ``A x = u`` with a semismooth Newton iteration;
    ``method="dykstra"`` runs alternating projections between the box and
    the affine set. Both return a point inside the box whose image matches
    ``u`` to ~1e-10.
    """
    u = np.asarray(u, dtype=float).ravel()
    if check_member:
        m = membership(sub, u)
        if not m.is_member:
            raise GammaBError(f"u is not in the embedding image (residual {m.residual:.3g})")
    if method == "newton":
        return _gamma_b_newton(sub, u, max_iter or 200)
    if method == "dykstra":
        return _gamma_b_dykstra(sub, u, max_iter or 10_000)
    raise ValueError(f"unknown method {method!r}")


def _gamma_b_newton(sub, u, max_iter):
    A, pinv = sub.A, sub.pseudo_inverse
    d_e = sub.d_e
    x0 = pinv @ u
    tol = _affine_tol(sub, u)
    reg = 1e-12 * float(np.trace(A @ A.T))

    def dual(lam):
        x = np.clip(x0 + A.T @ lam, -1.0, 1.0)
        r = u - A @ x
        return 0.5 * np.dot(x - x0, x - x0) + lam @ r, x, r

    lam = np.zeros(d_e)
    val, x, r = dual(lam)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol:
            return x
        free = np.abs(x0 + A.T @ lam) < 1.0
        Af = A[:, free]
        H = Af @ Af.T
        # exact step on the current active set; accepted only if it lands
        if np.linalg.matrix_rank(H) == d_e:
            trial = lam + np.linalg.solve(H, r)
            tv, tx, tr = dual(trial)
            if np.linalg.norm(tr) <= tol:
                return tx
        step = np.linalg.solve(H + reg * np.eye(d_e), r)
        slope = r @ step
        t = 1.0
        while True:
            nv, nx, nr = dual(lam + t * step)
            if nv >= val + 1e-4 * t * slope or t < 1e-14:
                break
            t *= 0.5
        lam = lam + t * step
        val, x, r = nv, nx, nr
    if np.linalg.norm(r) <= tol:
        return x
    raise GammaBError(f"Newton did not converge: affine residual {np.linalg.norm(r):.3g}")


def _gamma_b_dykstra(sub, u, max_iter):
    A, pinv = sub.A, sub.pseudo_inverse
    tol = _affine_tol(sub, u)
    x = pinv @ u
    p = np.zeros_like(x)
    for _ in range(max_iter):
        y = np.clip(x + p, -1.0, 1.0)
        p = x + p - y
        x_new = y - pinv @ (A @ y - u)
        xc = np.clip(x_new, -1.0, 1.0)
        if np.linalg.norm(x_new - x) < 1e-10 and np.linalg.norm(A @ xc - u) <= tol:
            return xc
        x = x_new
    box_viol = float(np.max(np.abs(x)) - 1.0)
    aff = float(np.linalg.norm(A @ np.clip(x, -1, 1) - u))
    raise GammaBError(
        f"Dykstra hit {max_iter} iterations (box violation {box_viol:.3g}, "
        f"affine residual {aff:.3g})"
    )


def gamma_w(sub, u):
    """Clamp of the pseudo-inverse image onto the box."""
    u = np.asarray(u, dtype=float).ravel()
    return np.clip(sub.pseudo_inverse @ u, -1.0, 1.0)


class BackwardImage(NamedTuple):
    """Full-space point for ``u`` and which map produced it ("B" or "W")."""

    point: np.ndarray
    used_map: str
    is_member: bool
    projected: bool


def backward(sub, u):
    """Memoized membership test plus the matching backward map.

    A point counted as a member by tolerance but lying just outside the
    image is mapped through the image of its membership certificate and
    flagged ``projected``.
    """
    u = np.asarray(u, dtype=float).ravel()
    key = u.tobytes()
    hit = sub._cache.get(key)
    if hit is not None:
        return hit
    m = membership(sub, u)
    if m.is_member:
        try:
            out = BackwardImage(gamma_b(sub, u, check_member=False), "B", True, False)
        except GammaBError:
            u_in = sub.A @ m.certificate
            out = BackwardImage(gamma_b(sub, u_in, check_member=False), "B", True, True)
    else:
        out = BackwardImage(gamma_w(sub, u), "W", False, False)
    with sub._lock:
        sub._cache[key] = out
    return out


def reduced_constraint(sub, u):
    """Feasibility value: non-negative exactly on the embedding image."""
    u = np.asarray(u, dtype=float).ravel()
    img = backward(sub, u)
    if img.is_member:
        return 1.0 - float(img.point @ img.point) / sub.d
    ua = u / sub.row_scales
    return -float(ua @ ua)


class ReducedEvaluation(NamedTuple):
    value: float
    constraint: float
    full_point: np.ndarray
    used_map: str
    finite: bool
    projected: bool


def reduced_objective(sub, f, u):
    """One expensive call of ``f`` at the backward image of ``u``.

    Returns ``(value, full_point, used_map)``.
    """
    ev = evaluate_reduced(sub, f, u)
    return ev.value, ev.full_point, ev.used_map


def evaluate_reduced(sub, f, u):
    """Objective and constraint at ``u`` sharing a single backward solve."""
    u = np.asarray(u, dtype=float).ravel()
    img = backward(sub, u)
    value = float(f(img.point))
    if img.is_member:
        g = 1.0 - float(img.point @ img.point) / sub.d
    else:
        ua = u / sub.row_scales
        g = -float(ua @ ua)
    return ReducedEvaluation(value, g, img.point.copy(), img.used_map,
                             bool(np.isfinite(value)), img.projected)


@dataclass
class ReducedProblem:
    """Bundles a subspace with the full-space objective for the inner loop."""

    subspace: Subspace
    objective: Callable

    @property
    def lower(self):
        return self.subspace.lower

    @property
    def upper(self):
        return self.subspace.upper

    @property
    def dim(self):
        return self.subspace.d_e

    def evaluate(self, u):
        return evaluate_reduced(self.subspace, self.objective, u)
