"""Bayesian optimization in high dimension through random and supervised linear embeddings."""

from .embeddings import TransferMatrix, build_transfer
from .gp import Doe, GpConfig, fit_gp, predict
from .optimizer import EgorseConfig, History, best_point, run_egorse
from .problems import get_problem, inflate, make_mb, modified_branin
from .subspace import compute_bounds

__all__ = [
    "Doe", "EgorseConfig", "GpConfig", "History", "TransferMatrix", "best_point",
    "build_transfer", "compute_bounds", "fit_gp", "get_problem", "inflate", "make_mb",
    "modified_branin", "predict", "run_egorse",
]
