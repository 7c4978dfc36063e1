"""Benchmark objectives: the modified Branin function and its inflated versions."""

import re
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .embeddings import TransferMatrix

BRANIN_LOWER = np.array([-5.0, 0.0])
BRANIN_UPPER = np.array([10.0, 15.0])


def _check_box(x, dim=None):
    x = np.asarray(x, dtype=float)
    if dim is not None and x.shape[-1] != dim:
        raise ValueError(f"expected dimension {dim}, got {x.shape[-1]}")
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError("input outside [-1, 1]")
    return x


def modified_branin_raw(x1, x2):
    """Modified Branin on its native domain [-5, 10] x [0, 15]."""
    quad = (x2 - 5.1 * x1**2 / (4 * np.pi**2) + 5 * x1 / np.pi - 6) ** 2
    return quad + (10 - 10 / (8 * np.pi)) * np.cos(x1) + 10 + (5 * x1 + 25) / 15


def modified_branin(u):
    """Modified Branin with both inputs rescaled to [-1, 1]."""
    u = _check_box(u, 2)
    x = BRANIN_LOWER + (u + 1.0) * 0.5 * (BRANIN_UPPER - BRANIN_LOWER)
    val = modified_branin_raw(x[..., 0], x[..., 1])
    return float(val) if np.ndim(val) == 0 else val


def inflation_matrix(d_base, d, rng):
    """Gaussian rows rescaled by their absolute sums.

    Each row then has unit absolute sum, so ``A @ x`` stays in the base box
    for every ``x`` in ``[-1, 1]^d``.
    """
    if d <= d_base:
        raise ValueError(f"need d > d_base, got d={d}, d_base={d_base}")
    A = rng.standard_normal((d_base, d))
    return A / np.sum(np.abs(A), axis=1, keepdims=True)


@dataclass
class EmbeddedProblem:
    """``base(A x)`` for x in ``[-1, 1]^d``, with an evaluation counter."""

    base: Callable
    inflation_matrix: np.ndarray
    seed: int = 0
    name: str = ""
    evaluations: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def d(self):
        return self.inflation_matrix.shape[1]

    @property
    def d_base(self):
        return self.inflation_matrix.shape[0]

    def evaluate(self, x):
        x = _check_box(np.asarray(x, dtype=float).ravel(), self.d)
        with self._lock:
            self.evaluations += 1
        u = np.clip(self.inflation_matrix @ x, -1.0, 1.0)
        return float(self.base(u))

    __call__ = evaluate

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


def inflate(base, d_base, d, seed, name=""):
    rng = np.random.default_rng(seed)
    return EmbeddedProblem(base, inflation_matrix(d_base, d, rng), seed, name)


def make_mb(d, seed=0):
    return inflate(modified_branin, 2, d, seed, name=f"mb_{d}")


def get_problem(name, seed=0):
    """Look up a problem by name.

    ``mb_<d>`` inflates the modified Branin to ``d`` inputs; ``custom:<path>``
    reads a 2 x d inflation matrix in transfer-matrix text format.
    """
    m = re.fullmatch(r"mb_(\d+)", name)
    if m:
        return make_mb(int(m.group(1)), seed)
    if name.startswith("custom:"):
        tm = TransferMatrix.load(name[len("custom:"):])
        if tm.d_e != 2:
            raise ValueError("custom inflation matrix must have 2 rows")
        A = np.array(tm.entries)
        if np.any(np.sum(np.abs(A), axis=1) > 1.0 + 1e-12):
            raise ValueError("custom inflation matrix rows must have absolute sum <= 1")
        return EmbeddedProblem(modified_branin, A, tm.seed or 0, name)
    raise KeyError(f"unknown problem {name!r}")


def problem_dimension(name):
    m = re.fullmatch(r"mb_(\d+)", name)
    if m:
        return int(m.group(1))
    if name.startswith("custom:"):
        return TransferMatrix.load(name[len("custom:"):]).d
    raise KeyError(f"unknown problem {name!r}")
