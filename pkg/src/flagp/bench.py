"""Timing of the two nearest-neighbour prediction paths.

``reestimate``: neighbours in the raw input space, then MAP lengthscales are
fitted on every neighbourhood before predicting (the classic local-GP recipe).
``fixed``: inputs were scaled once by global lengthscales, so each prediction
is only a k-d tree query and one small Cholesky.
"""

from __future__ import annotations

import csv
import time
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .emulator import nn_query, scale_input
from .gp_core import DEFAULT_NUGGET, GammaPrior, _Factor, default_starts, fit_map_gp


@dataclass(frozen=True)
class BenchRow:
    M: int
    d: int
    seed: int
    n_pred: int
    m: int
    t_reestimate: float
    t_fixed: float
    ratio: float


def synthetic_response(X) -> np.ndarray:
    """Smooth anisotropic test surface; later coordinates matter less."""
    d = X.shape[1]
    weights = 1.0 / np.arange(1, d + 1)
    return np.sin(2.0 * np.pi * X @ weights / weights.sum()) + 0.5 * np.cos(np.pi * X[:, 0])


def _predict_reestimate(X, w, tree, xq, m, nugget):
    idx, _ = nn_query(tree, xq, m)
    idx = np.sort(idx[0])
    Xn, wn = X[idx], w[idx]
    prior = GammaPrior.from_design(Xn)
    l, _, _ = fit_map_gp(Xn, wn, prior=prior, nugget=nugget, starts=default_starts(Xn, prior)[:1])
    Xs = scale_input(Xn, l)
    return _Factor(Xs, wn, nugget).predict(Xs, scale_input(xq, l))


def _predict_fixed(X_sc, w, tree, xq_sc, m, nugget):
    idx, _ = nn_query(tree, xq_sc, m)
    idx = np.sort(idx[0])
    Xn = X_sc[idx]
    return _Factor(Xn, w[idx], nugget).predict(Xn, xq_sc)


def time_paths(M: int, d: int, seed: int = 0, m: int = 50, n_pred: int = 200, nugget: float = DEFAULT_NUGGET) -> BenchRow:
    """Wall time of ``n_pred`` sequential predictions along each path.

    Building the trees and the global lengthscales is setup and is not timed.
    """
    rng = np.random.default_rng(seed)
    X = rng.random((M, d))
    w = synthetic_response(X)
    Xq = rng.random((n_pred, d))
    lengthscales = 0.5 * np.arange(1, d + 1)  # stands in for the precomputed estimates
    X_sc = scale_input(X, lengthscales)
    tree_raw, tree_sc = cKDTree(X), cKDTree(X_sc)
    Xq_sc = scale_input(Xq, lengthscales)

    t0 = time.perf_counter()
    for i in range(n_pred):
        _predict_reestimate(X, w, tree_raw, Xq[i : i + 1], m, nugget)
    t_re = time.perf_counter() - t0

    t0 = time.perf_counter()
    for i in range(n_pred):
        _predict_fixed(X_sc, w, tree_sc, Xq_sc[i : i + 1], m, nugget)
    t_fix = time.perf_counter() - t0
    return BenchRow(M, d, seed, n_pred, m, t_re, t_fix, t_re / t_fix)


def bench_scaling(M_grid, d_grid, seeds, m: int = 50, n_pred: int = 200) -> list[BenchRow]:
    return [time_paths(M, d, s, m, n_pred) for M in M_grid for d in d_grid for s in seeds]


def write_bench_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f.name for f in fields(BenchRow)])
        for r in rows:
            writer.writerow(astuple(r))
