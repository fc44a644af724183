"""Modular Bayesian calibration with the local-GP emulator.

The emulator is fit on simulator runs only. For a candidate ``(theta, sigma2)``
the weights at every field input are drawn from their Student-t predictive,
and the field curves are scored with an i.i.d. Gaussian likelihood. An
optional discrepancy on a user basis ``K`` is refit to the residuals at each
evaluation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import FieldData, unstandardize
from .emulator import FlaGPModel, draw_weights, predict_weights
from .gp_core import GammaPrior, NumericalError, _Factor, fit_map_gp, default_starts

logger = logging.getLogger(__name__)

ADAPT_SCALE = 2.38**2
ADAPT_EPS = 1e-10
ESTIMATORS = ("pseudo_marginal", "crn")


@dataclass(frozen=True)
class InverseGamma:
    alpha: float = 1.0
    beta: float = 0.001

    def logpdf(self, s2: float) -> float:
        if s2 <= 0:
            return -math.inf
        a, b = self.alpha, self.beta
        return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(s2) - b / s2

    def mode(self) -> float:
        return self.beta / (self.alpha + 1.0)


@dataclass(frozen=True)
class HalfCauchy:
    scale: float = 0.5

    def logpdf(self, s2: float) -> float:
        if s2 <= 0:
            return -math.inf
        return math.log(2.0 / (math.pi * self.scale)) - math.log1p((s2 / self.scale) ** 2)

    def mode(self) -> float:
        return self.scale / 10.0


@dataclass(frozen=True)
class DiscrepancySpec:
    """User basis ``K`` (d_y x p_delta, in standardized output units)."""

    K: np.ndarray
    nugget_mode: str = "estimate"
    nugget: float = 1e-4
    refit_every: int = 1

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim == 1:
            K = K[:, None]
        if K.shape[1] and np.linalg.matrix_rank(K) < K.shape[1]:
            raise ValueError("discrepancy basis must have full column rank")
        if self.nugget_mode not in ("estimate", "fixed"):
            raise ValueError("nugget_mode must be 'estimate' or 'fixed'")
        object.__setattr__(self, "K", K)

    @property
    def p(self) -> int:
        return self.K.shape[1]


def linear_discrepancy_basis(index_values) -> np.ndarray:
    """Intercept plus slope over the functional index, slope column scaled to [0, 1]."""
    v = np.asarray(index_values, dtype=float)
    return np.column_stack([np.ones_like(v), v / np.max(np.abs(v))])


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Emulator on joint inputs ``(x, t)`` plus standardized field data.

    ``X_F`` is n x d_x on the unit cube and ``Y`` is d_y x n in standardized units.
    """

    model: FlaGPModel
    X_F: np.ndarray
    Y: np.ndarray
    t_dim: int
    prior_sigma2: InverseGamma | HalfCauchy = field(default_factory=InverseGamma)
    discrepancy: DiscrepancySpec | None = None
    m_c: int = 50

    def __post_init__(self):
        if not 1 <= self.t_dim < self.model.d:
            raise ValueError("t_dim must leave at least one field input")
        X_F = np.asarray(self.X_F, dtype=float).reshape(-1, self.model.d - self.t_dim)
        Y = np.asarray(self.Y, dtype=float).reshape(self.model.basis.d_y, -1)
        if X_F.shape[0] != Y.shape[1]:
            raise ValueError("field inputs and observations disagree on n")
        if self.discrepancy is not None and self.discrepancy.K.shape[0] != Y.shape[0]:
            raise ValueError("discrepancy basis rows must equal d_y")
        object.__setattr__(self, "X_F", X_F)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_field(cls, model: FlaGPModel, field_data: FieldData, t_dim: int, **kw) -> "CalibrationProblem":
        return cls(model=model, X_F=field_data.X_F, Y=model.standardization.apply(field_data.Y), t_dim=t_dim, **kw)

    @property
    def n(self) -> int:
        return self.X_F.shape[0]

    @property
    def d_y(self) -> int:
        return self.Y.shape[0]

    @property
    def biased(self) -> bool:
        return self.discrepancy is not None and self.discrepancy.p > 0

    def joint_inputs(self, t, X=None) -> np.ndarray:
        X = self.X_F if X is None else np.atleast_2d(X)
        return np.hstack([X, np.tile(np.asarray(t, dtype=float), (X.shape[0], 1))])

    def t_ranges(self):
        return self.model.input_ranges[self.model.d - self.t_dim :]

    def t_names(self):
        return self.model.names[self.model.d - self.t_dim :]


def _in_support(t) -> bool:
    t = np.asarray(t, dtype=float)
    return bool(np.all(t >= 0.0) and np.all(t <= 1.0))


def _log_prior(t, sigma2, problem) -> float:
    if not _in_support(t) or sigma2 <= 0:
        return -math.inf
    return problem.prior_sigma2.logpdf(sigma2)


def _data_term(R, sigma2) -> float:
    n_dy = R.size
    return -0.5 * (n_dy * math.log(sigma2) + float(np.sum(R * R)) / sigma2)


def _emulator_residuals(t, problem, rng):
    rng = np.random.default_rng(rng)
    mu, s2 = predict_weights(problem.model, problem.joint_inputs(t), problem.m_c)
    w = draw_weights(mu, s2, problem.m_c, rng)
    return problem.Y - problem.model.basis.B @ w


def log_posterior_unbiased(t, sigma2, problem: CalibrationProblem, rng) -> float:
    """Log posterior (up to a constant) using one predictive draw of the emulator."""
    lp = _log_prior(t, sigma2, problem)
    if not np.isfinite(lp):
        return -math.inf
    if problem.n == 0:
        return lp
    return _data_term(_emulator_residuals(t, problem, rng), sigma2) + lp


# ---------------------------------------------------------------------------
# discrepancy
# ---------------------------------------------------------------------------


class _ZeroGP:
    def predict(self, X):
        k = np.atleast_2d(X).shape[0]
        return np.zeros(k), np.zeros(k)


class _DiscrepancyGP:
    def __init__(self, X, v, lengthscales, nugget):
        self.lengthscales = lengthscales
        self.nugget = nugget
        self.X_sc = X / np.sqrt(lengthscales)
        self.factor = _Factor(self.X_sc, v, nugget)

    def predict(self, X):
        return self.factor.predict(self.X_sc, np.atleast_2d(X) / np.sqrt(self.lengthscales))


@dataclass(frozen=True, eq=False)
class DiscrepancyModel:
    """Independent full GPs on the rows of the projected residual weights ``V`` (p_delta x n)."""

    K: np.ndarray
    V: np.ndarray
    gps: tuple
    df: int

    def predict(self, X):
        """Weight moments (mean, scale2), each p_delta x k."""
        out = [gp.predict(X) for gp in self.gps]
        if not out:
            k = np.atleast_2d(X).shape[0]
            return np.zeros((0, k)), np.zeros((0, k))
        return np.vstack([o[0] for o in out]), np.vstack([o[1] for o in out])

    def sample(self, X, rng):
        mean, scale2 = self.predict(X)
        return draw_weights(mean, scale2, self.df, rng)


def project_residuals(R, K) -> np.ndarray:
    """Least-squares weights ``(K'K)^-1 K' R``."""
    K = np.asarray(K, dtype=float)
    return np.linalg.solve(K.T @ K, K.T @ np.asarray(R, dtype=float))


def fit_discrepancy(R, spec: DiscrepancySpec, X_F, hyper=None) -> DiscrepancyModel:
    """Project residuals onto ``spec.K`` and fit one separable GP per weight row.

    ``hyper`` reuses previously fitted ``(lengthscales, nugget)`` pairs instead of
    re-optimizing.
    """
    X_F = np.atleast_2d(np.asarray(X_F, dtype=float))
    n = X_F.shape[0]
    if n < 2:
        raise ValueError("discrepancy model needs at least two field points")
    V = project_residuals(R, spec.K)
    prior = GammaPrior.from_design(X_F)
    gps = []
    for j, v in enumerate(V):
        if np.max(np.abs(v)) < 1e-14:
            gps.append(_ZeroGP())
            continue
        if hyper is not None and hyper[j] is not None:
            l, g = hyper[j]
        else:
            l, g = _fit_discrepancy_gp(X_F, v, spec, prior)
        gps.append(_DiscrepancyGP(X_F, v, l, g))
    return DiscrepancyModel(K=spec.K, V=V, gps=tuple(gps), df=n)


def _fit_discrepancy_gp(X_F, v, spec, prior):
    fit_nugget = spec.nugget_mode == "estimate"
    starts = default_starts(X_F, prior, fit_nugget)
    l, g, _ = fit_map_gp(X_F, v, prior=prior, nugget=spec.nugget, fit_nugget=fit_nugget, starts=starts)
    return l, g


def discrepancy_hyper(model: DiscrepancyModel):
    return [None if isinstance(gp, _ZeroGP) else (gp.lengthscales, gp.nugget) for gp in model.gps]


def log_posterior_biased(t, sigma2, problem: CalibrationProblem, rng, hyper=None, return_model=False):
    """As :func:`log_posterior_unbiased` with a discrepancy draw added to the emulator draw."""
    if not problem.biased:
        lp = log_posterior_unbiased(t, sigma2, problem, rng)
        return (lp, None) if return_model else lp
    lp = _log_prior(t, sigma2, problem)
    if not np.isfinite(lp) or problem.n == 0:
        return (lp, None) if return_model else lp
    rng = np.random.default_rng(rng)
    R = _emulator_residuals(t, problem, rng)
    try:
        dm = fit_discrepancy(R, problem.discrepancy, problem.X_F, hyper=hyper)
    except NumericalError:
        return (-math.inf, None) if return_model else -math.inf
    R = R - problem.discrepancy.K @ dm.sample(problem.X_F, rng)
    out = _data_term(R, sigma2) + lp
    return (out, dm) if return_model else out


def log_posterior(t, sigma2, problem, rng) -> float:
    if problem.biased:
        return log_posterior_biased(t, sigma2, problem, rng)
    return log_posterior_unbiased(t, sigma2, problem, rng)


# ---------------------------------------------------------------------------
# adaptive Metropolis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PosteriorSamples:
    """Chain of ``(theta, sigma2)``; the first ``n_burn`` rows are burn-in.

    ``theta`` is on the unit cube.
    """

    theta: np.ndarray
    sigma2: np.ndarray
    log_post: np.ndarray
    accepted: np.ndarray
    n_burn: int
    acceptance_rate: float
    proposal_cov: np.ndarray
    thin: int = 1

    @property
    def theta_post(self) -> np.ndarray:
        return self.theta[self.n_burn :]

    @property
    def sigma2_post(self) -> np.ndarray:
        return self.sigma2[self.n_burn :]

    def thinned(self, count: int) -> np.ndarray:
        """Evenly spaced post-burn-in row indices."""
        n_post = len(self.theta) - self.n_burn
        if n_post < 1:
            raise ValueError("posterior has no post burn-in samples")
        if count > n_post:
            raise ValueError(f"asked for {count} draws from {n_post} post burn-in samples")
        return self.n_burn + np.linspace(0, n_post - 1, count).round().astype(int)


def _initial_sigma2(problem, t0) -> float:
    if problem.n == 0:
        return problem.prior_sigma2.mode()
    mu, _ = predict_weights(problem.model, problem.joint_inputs(t0), problem.m_c)
    R = problem.Y - problem.model.basis.B @ mu
    return float(np.clip(np.mean(R * R), 1e-8, 1.0))


def mcmc_calibrate(
    problem: CalibrationProblem,
    n_samples: int,
    n_burn: int,
    seed=None,
    thin: int = 1,
    theta0=None,
    sigma2_0: float | None = None,
    estimator: str = "pseudo_marginal",
) -> PosteriorSamples:
    """Joint random-walk Metropolis on ``(theta, log sigma2)``.

    The proposal covariance is adapted from the chain history during burn-in
    and frozen afterwards. After burn-in every ``thin``-th state is kept.

    Each iteration gets its own rng substream. With ``estimator="pseudo_marginal"``
    the current state's stochastic log posterior is carried forward and never
    re-drawn. With ``estimator="crn"`` the current state is re-evaluated on the
    proposal's substream, so both sides of the acceptance ratio share their
    random draws. That trades exactness for much better mixing when one
    emulator draw gives a very noisy likelihood (large d_y).
    """
    if not 0 <= n_burn < n_samples:
        raise ValueError("need 0 <= n_burn < n_samples")
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    crn = estimator == "crn"
    rng = np.random.default_rng(seed)
    d_t = problem.t_dim
    dim = d_t + 1
    t = np.full(d_t, 0.5) if theta0 is None else np.asarray(theta0, dtype=float)
    s2 = _initial_sigma2(problem, t) if sigma2_0 is None else float(sigma2_0)
    u = np.append(t, math.log(s2))

    biased = problem.biased
    refit_every = problem.discrepancy.refit_every if biased else 1
    hyper = None

    def evaluate(uu, it, sub):
        nonlocal hyper
        s2_ = math.exp(uu[-1])
        if not biased:
            return log_posterior_unbiased(uu[:-1], s2_, problem, sub)
        reuse = hyper if (refit_every > 1 and it % refit_every) else None
        lp_, dm = log_posterior_biased(uu[:-1], s2_, problem, sub, hyper=reuse, return_model=True)
        if dm is not None and reuse is None:
            hyper = discrepancy_hyper(dm)
        return lp_

    def substream():
        return np.random.default_rng(rng.integers(2**63))

    lp = evaluate(u, 0, substream())
    if not np.isfinite(lp):
        raise NumericalError("log posterior is not finite at the starting point")

    cov = np.diag(np.append(np.full(d_t, 0.1**2), 0.5**2))
    t_adapt = min(100, max(2 * dim, n_burn // 5))
    mean_acc = u.copy()
    m2_acc = np.zeros((dim, dim))
    n_hist = 1

    total_iters = n_burn + (n_samples - n_burn) * thin
    theta_out = np.empty((n_samples, d_t))
    s2_out = np.empty(n_samples)
    lp_out = np.empty(n_samples)
    acc_out = np.zeros(n_samples, dtype=bool)
    post_accepts = 0
    row = 0
    chol = np.linalg.cholesky(cov)
    for it in range(1, total_iters + 1):
        prop = u + chol @ rng.standard_normal(dim)
        accepted = False
        if _in_support(prop[:-1]):
            seed_it = rng.integers(2**63)
            lp_prop = evaluate(prop, it, np.random.default_rng(seed_it))
            if crn:
                lp = evaluate(u, it, np.random.default_rng(seed_it))
            # Jacobian of the log transform on sigma2
            log_ratio = (lp_prop + prop[-1]) - (lp + u[-1])
            if np.isfinite(lp_prop) and math.log(rng.random()) < log_ratio:
                u, lp, accepted = prop, lp_prop, True
        if it > n_burn and accepted:
            post_accepts += 1

        if it <= n_burn:
            n_hist += 1
            delta = u - mean_acc
            mean_acc += delta / n_hist
            m2_acc += np.outer(delta, u - mean_acc)
            if it >= t_adapt:
                cov = ADAPT_SCALE / dim * (m2_acc / (n_hist - 1)) + ADAPT_EPS * np.eye(dim)
                chol = np.linalg.cholesky(cov)

        keep = it <= n_burn or (it - n_burn) % thin == 0
        if keep:
            theta_out[row] = u[:-1]
            s2_out[row] = math.exp(u[-1])
            lp_out[row] = lp
            acc_out[row] = accepted
            row += 1

    n_post_iters = total_iters - n_burn
    rate = post_accepts / n_post_iters
    logger.info("mcmc: %d iterations, post burn-in acceptance %.3f", total_iters, rate)
    return PosteriorSamples(
        theta=theta_out,
        sigma2=s2_out,
        log_post=lp_out,
        accepted=acc_out,
        n_burn=n_burn,
        acceptance_rate=rate,
        proposal_cov=cov,
        thin=thin,
    )


@dataclass(frozen=True)
class CalibratedPrediction:
    """Posterior predictive at ``k`` inputs, all d_y x k in output units."""

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    samples: np.ndarray


def calibrated_predict(
    problem: CalibrationProblem,
    posterior: PosteriorSamples,
    X_new,
    m: int = 50,
    S_sub: int = 100,
    rng=None,
    draws=None,
) -> CalibratedPrediction:
    """Predictive samples over ``S_sub`` thinned posterior draws, with observation noise.

    ``draws`` may be a list of ``(theta, sigma2)`` pairs used instead of the chain.
    """
    rng = np.random.default_rng(rng)
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if draws is None:
        rows = posterior.thinned(S_sub)
        draws = [(posterior.theta[r], float(posterior.sigma2[r])) for r in rows]
    if not draws:
        raise ValueError("no posterior draws to predict with")
    model = problem.model
    B = model.basis.B
    out = np.empty((problem.d_y, X_new.shape[0], len(draws)))
    for s, (theta, s2) in enumerate(draws):
        mu, sc2 = predict_weights(model, problem.joint_inputs(theta, X_new), m)
        z = B @ draw_weights(mu, sc2, m, rng)
        if problem.biased and problem.n >= 2:
            R = _emulator_residuals(theta, problem, rng)
            dm = fit_discrepancy(R, problem.discrepancy, problem.X_F)
            z = z + problem.discrepancy.K @ dm.sample(X_new, rng)
        if s2 > 0:
            z = z + math.sqrt(s2) * rng.standard_normal(z.shape)
        out[:, :, s] = z
    flat = unstandardize(out.reshape(problem.d_y, -1), model.standardization)
    samples = flat.reshape(out.shape)
    lower, upper = np.quantile(samples, [0.025, 0.975], axis=2)
    return CalibratedPrediction(mean=samples.mean(axis=2), lower=lower, upper=upper, samples=samples)
