"""Deterministic MAP calibration with a Normal approximation to the emulator.

Each field curve has likelihood ``N(0, sigma2 I + C S C^T)`` for its residual
from the emulator mean. That density is evaluated through the q-dimensional
projection onto ``C`` so no d_y x d_y matrix is ever formed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .calibration import CalibrationProblem, _initial_sigma2, _log_prior, fit_discrepancy
from .dataset import from_unit_hypercube
from .emulator import FlaGPModel, predict_weights
from .gp_core import NumericalError

LOG_2PI = math.log(2.0 * math.pi)
LOG_SIGMA2_BOUNDS = (math.log(1e-8), math.log(10.0))


@dataclass(frozen=True)
class GaussianSummary:
    """Normal moments of the basis weights at ``k`` field points (each array p x k)."""

    m_w: np.ndarray
    S_w: np.ndarray
    m_v: np.ndarray | None = None
    S_v: np.ndarray | None = None

    def __post_init__(self):
        for s in (self.S_w, self.S_v):
            if s is not None and np.any(np.asarray(s) < 0):
                raise ValueError("variances must be non-negative")


def t_variance(scale2, df):
    """Variance of a scaled Student-t, ``scale2 * df / (df - 2)``."""
    if df <= 2:
        raise ValueError(f"Student-t variance needs df > 2, got {df}")
    return np.asarray(scale2, dtype=float) * (df / (df - 2.0))


def normal_summary(model: FlaGPModel, x_F, t, m_c: int = 50) -> GaussianSummary:
    """Normal approximation of the weight predictive at field inputs ``x_F`` and parameter ``t``."""
    if m_c < 3:
        raise ValueError("m_c must be at least 3 for the predictive variance to exist")
    x_F = np.atleast_2d(np.asarray(x_F, dtype=float))
    X = np.hstack([x_F, np.tile(np.asarray(t, dtype=float), (x_F.shape[0], 1))])
    mu, s2 = predict_weights(model, X, m_c)
    return GaussianSummary(m_w=mu, S_w=t_variance(s2, m_c))


def loglik_rank_reduced(r, C_basis, S, sigma2: float) -> float:
    """Log density of ``r ~ N(0, sigma2 I + C diag(S) C^T)`` in O(d_y q + q^3).

    Includes every normalizing constant, so it equals the dense log-pdf exactly.
    """
    r = np.asarray(r, dtype=float)
    C = np.asarray(C_basis, dtype=float)
    S = np.asarray(S, dtype=float)
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    d_y, q = C.shape
    if q == 0:
        return -0.5 * (d_y * (LOG_2PI + math.log(sigma2)) + float(r @ r) / sigma2)
    CtC = C.T @ C
    try:
        fac = cho_factor(CtC, lower=True)
    except LinAlgError as exc:
        raise NumericalError("basis matrix is rank deficient") from exc
    diag = np.diag(fac[0])
    if diag.min() <= 1e-8 * diag.max():
        raise NumericalError("basis matrix is rank deficient")
    Ctr = C.T @ r
    gamma = cho_solve(fac, Ctr)
    resid_ss = max(float(r @ r - Ctr @ gamma), 0.0)
    logdet_ctc = 2.0 * float(np.sum(np.log(diag)))

    cov = np.diag(S) + sigma2 * cho_solve(fac, np.eye(q))
    try:
        cfac = cho_factor(cov, lower=True)
    except LinAlgError as exc:
        raise NumericalError("projected covariance is not positive definite") from exc
    logdet_cov = 2.0 * float(np.sum(np.log(np.diag(cfac[0]))))
    log_gamma = -0.5 * (q * LOG_2PI + logdet_cov + float(gamma @ cho_solve(cfac, gamma)))

    return -0.5 * ((d_y - q) * (LOG_2PI + math.log(sigma2)) + logdet_ctc + resid_ss / sigma2) + log_gamma


def _summaries(t, problem: CalibrationProblem):
    """Residual means, the combined basis and per-point variances for the MAP objective."""
    summ = normal_summary(problem.model, problem.X_F, t, problem.m_c)
    B = problem.model.basis.B
    R = problem.Y - B @ summ.m_w
    if not problem.biased:
        return R, B, summ.S_w
    dm = fit_discrepancy(R, problem.discrepancy, problem.X_F)
    m_v, s2_v = dm.predict(problem.X_F)
    K = problem.discrepancy.K
    R = R - K @ m_v
    S = np.vstack([summ.S_w, t_variance(s2_v, dm.df)])
    return R, np.hstack([B, K]), S


def map_objective(t, sigma2: float, problem: CalibrationProblem) -> float:
    """Log posterior under the Normal approximation; deterministic in ``(t, sigma2)``."""
    lp = _log_prior(t, sigma2, problem)
    if not np.isfinite(lp) or problem.n == 0:
        return lp
    R, C, S = _summaries(t, problem)
    return lp + sum(loglik_rank_reduced(R[:, i], C, S[:, i], sigma2) for i in range(problem.n))


def pattern_search(f, x0, lower, upper, step=0.25, tol=1e-7, max_evals=5000):
    """Maximize ``f`` on a box by coordinate polling with step halving.

    Steps are fractions of each coordinate's range. Returns ``(x, f(x), evals)``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    width = upper - lower
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    fx = f(x)
    evals = 1
    h = step
    while h > tol and evals < max_evals:
        improved = False
        for k in range(x.size):
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[k] = np.clip(x[k] + sgn * h * width[k], lower[k], upper[k])
                if y[k] == x[k]:
                    continue
                fy = f(y)
                evals += 1
                if fy > fx:
                    x, fx, improved = y, fy, True
                    break
        if not improved:
            h *= 0.5
    return x, fx, evals


@dataclass(frozen=True)
class MapResult:
    theta: np.ndarray
    theta_natural: np.ndarray
    sigma2: float
    objective: float
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "theta_natural": self.theta_natural.tolist(),
            "sigma2": self.sigma2,
            "objective": self.objective,
            "restarts": self.trace,
        }


def map_optimize(problem: CalibrationProblem, restarts: int = 7, seed=None, workers: int = 1) -> MapResult:
    """Best of ``restarts`` bounded pattern searches over ``(theta, log sigma2)``.

    The first start is the centre of the parameter box; the rest are uniform draws.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    d_t = problem.t_dim
    rng = np.random.default_rng(seed)
    lo = np.append(np.zeros(d_t), LOG_SIGMA2_BOUNDS[0])
    hi = np.append(np.ones(d_t), LOG_SIGMA2_BOUNDS[1])
    centre = np.full(d_t, 0.5)
    starts = [np.append(centre, math.log(_initial_sigma2(problem, centre)))]
    for _ in range(restarts - 1):
        starts.append(np.append(rng.random(d_t), rng.uniform(math.log(1e-4), 0.0)))

    def objective(u):
        return map_objective(u[:-1], math.exp(u[-1]), problem)

    def run(u0):
        u, fu, evals = pattern_search(objective, u0, lo, hi)
        return {"start": u0.tolist(), "end": u.tolist(), "objective": float(fu), "evals": evals}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trace = list(pool.map(run, starts))
    else:
        trace = [run(u0) for u0 in starts]
    best = max(trace, key=lambda r: r["objective"])
    u = np.asarray(best["end"])
    theta = u[:-1]
    return MapResult(
        theta=theta,
        theta_natural=from_unit_hypercube(theta, problem.t_ranges()),
        sigma2=math.exp(u[-1]),
        objective=best["objective"],
        trace=trace,
    )
