"""Gaussian correlation, empirical-Bayes lengthscales and the Student-t local predictor.

All GPs here are zero-mean with the process variance integrated out under a
reference prior, so predictions are Student-t with ``m`` degrees of freedom and
the concentrated likelihood depends on the data only through
``Psi = w' C^-1 w`` and ``log|C|``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist

logger = logging.getLogger(__name__)

DEFAULT_NUGGET = 1e-7
LENGTHSCALE_BOUNDS = (1e-4, 1e4)
NUGGET_BOUNDS = (1e-6, 1.0)
GAMMA_SHAPE = 1.5


class NumericalError(RuntimeError):
    """A factorization or optimization could not be completed."""


@dataclass(frozen=True)
class GammaPrior:
    """Independent Gamma(shape, rate) prior on every lengthscale."""

    shape: float = GAMMA_SHAPE
    rate: float = 1.0

    def logpdf(self, l):
        l = np.asarray(l, dtype=float)
        return np.sum((self.shape - 1.0) * np.log(l) - self.rate * l) + l.size * (
            self.shape * math.log(self.rate) - math.lgamma(self.shape)
        )

    @classmethod
    def from_design(cls, X, shape: float = GAMMA_SHAPE) -> "GammaPrior":
        """Mode placed at the squared 10th-percentile pairwise distance of ``X``."""
        X = np.asarray(X, dtype=float)
        dist = pdist(X)
        dist = dist[dist > 0]
        q10 = np.percentile(dist, 10) if dist.size else 1.0
        mode = max(q10**2, LENGTHSCALE_BOUNDS[0])
        return cls(shape=shape, rate=(shape - 1.0) / mode)


@dataclass(frozen=True)
class PredictiveT:
    """Student-t law ``mean + sqrt(scale2) * t_df``."""

    mean: float
    scale2: float
    df: int

    @property
    def variance(self) -> float:
        if self.df <= 2:
            raise ValueError("variance needs more than 2 degrees of freedom")
        return self.scale2 * self.df / (self.df - 2)


@dataclass(frozen=True)
class SubsampleSpec:
    """How the subsets for lengthscale estimation are drawn.

    ``size`` is the number of BLHS divisions per coordinate for ``method="blhs"``
    and the subset size for ``method="stratified"``. ``None`` lets the emulator
    pick a size from the ensemble.
    """

    method: str = "blhs"
    size: int | None = None
    replicates: int = 25
    seed: int | None = None

    def __post_init__(self):
        if self.method not in ("blhs", "stratified"):
            raise ValueError(f"unknown subsample method {self.method!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


def _as_lengthscales(l, d):
    l = np.broadcast_to(np.asarray(l, dtype=float), (d,))
    if np.any(~np.isfinite(l)) or np.any(l <= 0):
        raise ValueError("lengthscales must be positive and finite")
    return l


def corr_matrix(X1, X2=None, l=1.0, nugget: float = 0.0) -> np.ndarray:
    """Separable Gaussian correlation ``exp(-sum_k (x1_k - x2_k)^2 / l_k)``.

    The nugget is added to the diagonal only in the symmetric case
    (``X2`` omitted or the same object as ``X1``).
    """
    if nugget < 0:
        raise ValueError("nugget must be non-negative")
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    symmetric = X2 is None or X2 is X1
    X2 = X1 if symmetric else np.atleast_2d(np.asarray(X2, dtype=float))
    s = np.sqrt(_as_lengthscales(l, X1.shape[1]))
    K = np.exp(-cdist(X1 / s, X2 / s, "sqeuclidean"))
    if symmetric and nugget:
        K[np.diag_indices_from(K)] += nugget
    return K


def _sq_diffs(X):
    return (X[:, None, :] - X[None, :, :]) ** 2


def _nlml(log_params, D2, w, prior: GammaPrior | None, nugget, fit_nugget: bool):
    """Negative log concentrated likelihood (minus log prior) and its gradient in log space."""
    m, _, d = D2.shape
    l = np.exp(log_params[:d])
    g = math.exp(log_params[d]) if fit_nugget else nugget
    K0 = np.exp(-(D2 @ (1.0 / l)))
    C = K0.copy()
    C[np.diag_indices(m)] += g
    try:
        cf = cho_factor(C, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("correlation matrix is not positive definite") from exc
    alpha = cho_solve(cf, w, check_finite=False)
    psi = float(w @ alpha)
    if psi <= 0:
        raise NumericalError("non-positive quadratic form")
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    value = 0.5 * m * math.log(psi) + 0.5 * logdet

    Cinv = cho_solve(cf, np.eye(m), check_finite=False)
    A = 0.5 * Cinv - (0.5 * m / psi) * np.outer(alpha, alpha)
    grad = np.einsum("ij,ijk->k", K0 * A, D2) / l
    if prior is not None:
        value -= prior.logpdf(l)
        grad -= (prior.shape - 1.0) - prior.rate * l
    if fit_nugget:
        grad = np.append(grad, g * np.trace(A))
    return value, grad


def neg_log_marginal(l, X, w, nugget: float = DEFAULT_NUGGET, prior: GammaPrior | None = None) -> float:
    """``(m/2) log(w'C^-1 w) + (1/2) log|C| - log prior(l)`` up to a constant."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = np.asarray(w, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("need at least two points")
    l = _as_lengthscales(l, X.shape[1])
    return _nlml(np.log(l), _sq_diffs(X), w, prior, nugget, False)[0]


def neg_log_marginal_grad(l, X, w, nugget: float = DEFAULT_NUGGET, prior: GammaPrior | None = None):
    """Gradient of :func:`neg_log_marginal` with respect to ``l``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    l = _as_lengthscales(l, X.shape[1])
    _, g_log = _nlml(np.log(l), _sq_diffs(X), np.asarray(w, dtype=float), prior, nugget, False)
    return g_log / l


def fit_map_gp(
    X,
    w,
    prior: GammaPrior | None = None,
    nugget: float = DEFAULT_NUGGET,
    fit_nugget: bool = False,
    starts=None,
    rng=None,
    restarts: int = 3,
):
    """MAP lengthscales (and optionally nugget) by bounded L-BFGS on the log scale.

    Returns ``(lengthscales, nugget, objective)``. ``starts`` overrides the
    multi-start points (rows of log-parameters).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = np.asarray(w, dtype=float)
    m, d = X.shape
    if prior is None:
        prior = GammaPrior.from_design(X)
    D2 = _sq_diffs(X)
    lo, hi = np.log(LENGTHSCALE_BOUNDS)
    bounds = [(lo, hi)] * d
    if fit_nugget:
        bounds.append(tuple(np.log(NUGGET_BOUNDS)))
    if starts is None:
        rng = np.random.default_rng(rng)
        base = default_starts(X, prior, fit_nugget)
        mode = (prior.shape - 1.0) / prior.rate
        dmax = max(float(D2.sum(axis=2).max()), 2 * mode)
        extra = rng.uniform(math.log(mode), math.log(dmax), size=(max(restarts - len(base), 0), d))
        if fit_nugget:
            extra = np.column_stack([extra, np.full(len(extra), math.log(1e-2))])
        starts = np.vstack([base, extra])[: max(restarts, 1)]
    starts = np.atleast_2d(starts)

    def fun(p):
        try:
            return _nlml(p, D2, w, prior, nugget, fit_nugget)
        except NumericalError:
            return 1e25, np.zeros_like(p)

    best = None
    for x0 in starts:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds)
        if np.isfinite(res.fun) and res.fun < 1e24 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise NumericalError("lengthscale optimization failed from every start")
    l = np.exp(best.x[:d])
    g = math.exp(best.x[d]) if fit_nugget else nugget
    return l, g, float(best.fun)


def default_starts(X, prior: GammaPrior, fit_nugget: bool = False) -> np.ndarray:
    """Deterministic log-scale starting points: the prior mode and the geometric
    midpoint between it and the largest squared distance."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = X.shape[1]
    mode = (prior.shape - 1.0) / prior.rate
    dmax = max(float(pdist(X, "sqeuclidean").max()), 2 * mode) if len(X) > 1 else 2 * mode
    rows = np.array([np.full(d, math.log(mode)), np.full(d, 0.5 * (math.log(mode) + math.log(dmax)))])
    if fit_nugget:
        rows = np.column_stack([rows, np.full(2, math.log(1e-2))])
    return rows


def blhs_subsample(X, d_est: int, seed=None) -> np.ndarray:
    """Indices of the points inside a random Latin hypercube of blocks.

    Each coordinate is cut into ``d_est`` equal blocks; ``d_est`` blocks are
    chosen so no two share a level in any coordinate.
    """
    if d_est < 2:
        raise ValueError("d_est must be >= 2")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    rng = np.random.default_rng(seed)
    M, d = X.shape
    levels = np.minimum((X * d_est).astype(int), d_est - 1)
    perms = np.stack([rng.permutation(d_est) for _ in range(d)], axis=1)
    # block owning each level of coordinate 0
    owner = np.empty(d_est, dtype=int)
    owner[perms[:, 0]] = np.arange(d_est)
    block = owner[levels[:, 0]]
    keep = np.all(levels == perms[block], axis=1)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise ValueError("BLHS selected no points")
    return idx


def stratified_subsample(X, m_est: int, seed=None) -> np.ndarray:
    """``m_est`` indices drawn without replacement, stratified on the first principal coordinate."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    M = X.shape[0]
    if m_est > M:
        raise ValueError(f"m_est={m_est} exceeds M={M}")
    if m_est == M:
        return np.arange(M)
    rng = np.random.default_rng(seed)
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    proj = Xc @ Vt[0]
    n_bins = math.ceil(math.sqrt(m_est))
    edges = np.quantile(proj, np.linspace(0, 1, n_bins + 1)[1:-1])
    bins = np.searchsorted(edges, proj, side="right")
    counts = np.bincount(bins, minlength=n_bins)
    share = counts * (m_est / M)
    alloc = np.floor(share).astype(int)
    short = m_est - alloc.sum()
    if short:
        order = np.argsort(-(share - alloc), kind="stable")
        alloc[order[:short]] += 1
    picked = [rng.choice(np.flatnonzero(bins == b), size=alloc[b], replace=False) for b in range(n_bins) if alloc[b]]
    return np.sort(np.concatenate(picked))


def _subsample(X, spec: SubsampleSpec, rng):
    if spec.size is None:
        raise ValueError("subsample size is unset")
    d = X.shape[1]
    if spec.method == "stratified":
        return stratified_subsample(X, min(spec.size, X.shape[0]), rng)
    for _ in range(100):
        try:
            idx = blhs_subsample(X, spec.size, rng)
        except ValueError:
            continue
        if idx.size >= d + 2:
            return idx
    raise ValueError("BLHS keeps selecting too few points; lower d_est")


def estimate_lengthscales(X, w, spec: SubsampleSpec, nugget: float = DEFAULT_NUGGET, rng=None) -> np.ndarray:
    """Coordinatewise median of MAP lengthscales over ``spec.replicates`` subsets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = np.asarray(w, dtype=float)
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    fits = []
    for _ in range(spec.replicates):
        idx = _subsample(X, spec, rng)
        if idx.size < X.shape[1] + 2:
            raise ValueError("subsample smaller than d + 2")
        try:
            l, _, _ = fit_map_gp(X[idx], w[idx], nugget=nugget, rng=rng)
        except NumericalError as exc:
            logger.warning("lengthscale replicate failed: %s", exc)
            continue
        fits.append(l)
    if not fits:
        raise NumericalError("every lengthscale replicate failed")
    return np.median(np.vstack(fits), axis=0)


class _Factor:
    """Cholesky factor of a neighbourhood correlation matrix with the weights pre-solved."""

    __slots__ = ("L", "alpha", "psi", "m")

    def __init__(self, Xn, wn, nugget):
        C = corr_matrix(Xn, nugget=nugget)
        try:
            self.L = cholesky(C, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("neighbourhood correlation matrix is not positive definite") from exc
        self.alpha = cho_solve((self.L, True), wn, check_finite=False)
        self.psi = float(wn @ self.alpha)
        self.m = len(wn)

    def predict(self, Xn, xq):
        """Mean and squared scale at rows of ``xq`` (isotropic unit lengthscales)."""
        c = np.exp(-cdist(np.atleast_2d(xq), Xn, "sqeuclidean"))
        v = solve_triangular(self.L, c.T, lower=True, check_finite=False)
        mean = c @ self.alpha
        scale2 = self.psi / self.m * np.maximum(1.0 - np.sum(v * v, axis=0), 0.0)
        return mean, scale2


def student_t_predict(X_nn, w_nn, x_sc, nugget: float = DEFAULT_NUGGET) -> PredictiveT:
    """Student-t predictive at ``x_sc`` from a neighbourhood on pre-scaled inputs."""
    X_nn = np.atleast_2d(np.asarray(X_nn, dtype=float))
    w_nn = np.asarray(w_nn, dtype=float)
    if X_nn.shape[0] < 2:
        raise ValueError("need at least two neighbours")
    fac = _Factor(X_nn, w_nn, nugget)
    mean, scale2 = fac.predict(X_nn, x_sc)
    return PredictiveT(float(mean[0]), float(scale2[0]), X_nn.shape[0])


def sample_t(pred: PredictiveT, rng) -> float:
    rng = np.random.default_rng(rng)
    return pred.mean + math.sqrt(pred.scale2) * rng.standard_t(pred.df)
