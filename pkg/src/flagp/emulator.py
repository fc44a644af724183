"""Functional emulator: EOF basis, one locally-predicted GP per basis weight.

Inputs are stretched per component by ``1/sqrt(lengthscale)`` once at fit time,
so nearest neighbours in the scaled space are the most correlated runs and
prediction uses a fixed isotropic kernel.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .basis import BasisModel, rsvd_basis, svd_basis
from .dataset import Ensemble, Standardization, standardize, unstandardize
from .gp_core import DEFAULT_NUGGET, PredictiveT, SubsampleSpec, _Factor, estimate_lengthscales

logger = logging.getLogger(__name__)

# BLHS divisions used for the ball-drop ensemble sizes 98 ... 10082
_BLHS_TABLE = ((98, 2), (242, 4), (578, 8), (1058, 16), (5618, 50), (10082, 100))


def blhs_divisions(M: int, d: int = 2) -> int:
    """Divisions per coordinate for an ensemble of size ``M`` in ``d`` inputs.

    Nearest tabulated size, reduced while a subset would expect fewer than
    ``2 (d + 2)`` points (a subset holds about ``M / divisions^(d-1)``).
    """
    k = min(_BLHS_TABLE, key=lambda row: abs(np.log(row[0] / M)))[1]
    while k > 2 and M / k ** (d - 1) < 2 * (d + 2):
        k -= 1
    return k


def resolve_subsample(spec: SubsampleSpec, M: int, d: int) -> SubsampleSpec:
    """Fill in a default subset size for an ``M`` x ``d`` design."""
    if spec.size is not None:
        return spec
    size = blhs_divisions(M, d) if spec.method == "blhs" else min(256, M)
    return replace(spec, size=size)


@dataclass(frozen=True)
class EmulatorConfig:
    min_var_frac: float = 0.95
    p: int | None = None
    rsvd: bool = False
    oversample: int = 10
    power_iters: int = 2
    subsample: SubsampleSpec = field(default_factory=SubsampleSpec)
    nugget: float = DEFAULT_NUGGET
    per_index_scale: bool = False
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmulatorConfig":
        d = dict(d)
        if isinstance(d.get("subsample"), dict):
            d["subsample"] = SubsampleSpec(**d["subsample"])
        return cls(**d)


def scale_input(x, lengthscales) -> np.ndarray:
    """Stretch/compress inputs: ``x / sqrt(l)`` column-wise."""
    l = np.asarray(lengthscales, dtype=float)
    if np.any(l <= 0) or np.any(~np.isfinite(l)):
        raise ValueError("lengthscales must be positive and finite")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != l.size:
        raise ValueError(f"input has {x.shape[-1]} columns, expected {l.size}")
    return x / np.sqrt(l)


@dataclass(frozen=True, eq=False)
class ComponentModel:
    """One basis-weight GP: lengthscales, scaled design and its k-d tree."""

    lengthscales: np.ndarray
    X_sc: np.ndarray
    w: np.ndarray
    nugget: float = DEFAULT_NUGGET

    @cached_property
    def index(self) -> cKDTree:
        return cKDTree(self.X_sc)

    @cached_property
    def dense_factor(self) -> _Factor:
        # used when the neighbourhood is the whole ensemble
        return _Factor(self.X_sc, self.w, self.nugget)

    @property
    def M(self) -> int:
        return self.X_sc.shape[0]


def nn_query(index: cKDTree, x_sc, m: int):
    """``m`` nearest rows to each query in Euclidean distance; ties go to the lower index.

    Returns ``(indices, distances)`` with shape ``(k, m)``, sorted by distance.
    """
    x_sc = np.atleast_2d(np.asarray(x_sc, dtype=float))
    data = index.data
    M = data.shape[0]
    if not 1 <= m <= M:
        raise ValueError(f"m={m} must be in [1, {M}]")
    k_extra = min(M, m + 1)
    dist, idx = index.query(x_sc, k=k_extra)
    dist = dist.reshape(len(x_sc), k_extra)
    idx = idx.reshape(len(x_sc), k_extra)
    out_i = np.empty((len(x_sc), m), dtype=np.intp)
    out_d = np.empty((len(x_sc), m))
    for r in range(len(x_sc)):
        d_r, i_r = dist[r], idx[r]
        if k_extra > m and d_r[m] == d_r[m - 1]:
            # tie straddles the cut: resolve against every point
            d_r = np.sqrt(np.sum((data - x_sc[r]) ** 2, axis=1))
            i_r = np.arange(M)
        order = np.lexsort((i_r, d_r))[:m]
        out_i[r] = i_r[order]
        out_d[r] = d_r[order]
    return out_i, out_d


@dataclass(frozen=True, eq=False)
class FlaGPModel:
    basis: BasisModel
    components: tuple[ComponentModel, ...]
    standardization: Standardization
    X: np.ndarray
    input_ranges: tuple[tuple[float, float], ...]
    names: tuple[str, ...]
    config: EmulatorConfig

    def __post_init__(self):
        if len(self.components) != self.basis.p:
            raise ValueError("one component model is required per basis vector")

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.basis.p


@dataclass(frozen=True)
class FunctionalPrediction:
    """Predictions at ``k`` inputs. ``mean`` is d_y x k in output units,
    ``samples`` (if drawn) d_y x k x S; weight moments are p x k."""

    mean: np.ndarray
    weight_mean: np.ndarray
    weight_scale2: np.ndarray
    df: int
    samples: np.ndarray | None = None

    def component_laws(self, i: int = 0) -> list[PredictiveT]:
        return [PredictiveT(float(mu), float(s2), self.df) for mu, s2 in zip(self.weight_mean[:, i], self.weight_scale2[:, i])]

    def quantiles(self, q=(0.025, 0.975)) -> np.ndarray:
        if self.samples is None:
            raise ValueError("no predictive samples were drawn")
        return np.quantile(self.samples, q, axis=2)


def build_component(X, w, lengthscales, nugget=DEFAULT_NUGGET) -> ComponentModel:
    l = np.asarray(lengthscales, dtype=float)
    return ComponentModel(lengthscales=l, X_sc=scale_input(X, l), w=np.asarray(w, dtype=float), nugget=nugget)


def fit(ensemble: Ensemble, config: EmulatorConfig | None = None) -> FlaGPModel:
    """Build the basis, estimate lengthscales per component, and index the scaled designs."""
    config = config or EmulatorConfig()
    if ensemble.M < 2:
        raise ValueError("need at least two runs")
    Z_std, std = standardize(ensemble.Z_raw, per_index_scale=config.per_index_scale)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    if config.rsvd:
        if config.p is None:
            raise ValueError("randomized SVD needs a fixed p")
        basis = rsvd_basis(Z_std, config.p, config.oversample, config.power_iters, seed=np.random.default_rng(seeds[0]))
    else:
        basis = svd_basis(Z_std, min_var_frac=config.min_var_frac, p=config.p)
    comp_seeds = seeds[1].spawn(basis.p)
    subsample = resolve_subsample(config.subsample, ensemble.M, ensemble.X.shape[1])
    config = replace(config, subsample=subsample)

    def one(j):
        rng = np.random.default_rng(comp_seeds[j])
        return estimate_lengthscales(ensemble.X, basis.W[j], subsample, nugget=config.nugget, rng=rng)

    if config.workers > 1 and basis.p > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            ls = list(pool.map(one, range(basis.p)))
    else:
        ls = [one(j) for j in range(basis.p)]
    components = tuple(build_component(ensemble.X, basis.W[j], ls[j], config.nugget) for j in range(basis.p))
    logger.info("fitted emulator: M=%d p=%d var_explained=%.4f", ensemble.M, basis.p, basis.var_explained)
    return FlaGPModel(
        basis=basis,
        components=components,
        standardization=std,
        X=ensemble.X,
        input_ranges=ensemble.input_ranges,
        names=ensemble.names,
        config=config,
    )


def predict_weights(model: FlaGPModel, x, m: int = 50):
    """Student-t moments of every basis weight at each row of ``x`` (unit-cube inputs).

    Returns ``(mean, scale2)``, each p x k; degrees of freedom equal ``m``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.d:
        raise ValueError(f"inputs have {x.shape[1]} columns, model expects {model.d}")
    if not 2 <= m <= model.M:
        raise ValueError(f"neighbourhood size m={m} must be in [2, {model.M}]")
    if np.any(x < 0.0) or np.any(x > 1.0):
        warnings.warn("predicting outside the unit hypercube (extrapolation)", stacklevel=2)
    k = x.shape[0]
    mean = np.empty((model.p, k))
    scale2 = np.empty((model.p, k))
    for j, comp in enumerate(model.components):
        xq = scale_input(x, comp.lengthscales)
        if m == comp.M:
            mean[j], scale2[j] = comp.dense_factor.predict(comp.X_sc, xq)
            continue
        idx, _ = nn_query(comp.index, xq, m)
        idx.sort(axis=1)  # canonical order of the neighbour set
        for r in range(k):
            Xn = comp.X_sc[idx[r]]
            fac = _Factor(Xn, comp.w[idx[r]], comp.nugget)
            mu, s2 = fac.predict(Xn, xq[r])
            mean[j, r], scale2[j, r] = mu[0], s2[0]
    return mean, scale2


def draw_weights(mean, scale2, df, rng, size=None):
    """Student-t draws of the weights; ``size`` adds trailing sample axes."""
    shape = mean.shape if size is None else mean.shape + (size,)
    t = rng.standard_t(df, size=shape)
    if size is None:
        return mean + np.sqrt(scale2) * t
    return mean[..., None] + np.sqrt(scale2)[..., None] * t


def predict(model: FlaGPModel, x, m: int = 50, S: int = 0, rng=None, standardized: bool = False) -> FunctionalPrediction:
    """Functional prediction at unit-cube inputs ``x`` (k x d, or one d-vector)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mu, s2 = predict_weights(model, x, m)
    mean = model.basis.B @ mu
    samples = None
    if S > 0:
        rng = np.random.default_rng(rng)
        streams = rng.spawn(model.p)
        w = np.stack([draw_weights(mu[j], s2[j], m, streams[j], size=S) for j in range(model.p)])
        samples = np.einsum("yp,pks->yks", model.basis.B, w)
    if not standardized:
        mean = unstandardize(mean, model.standardization)
        if samples is not None:
            flat = samples.reshape(model.basis.d_y, -1)
            samples = unstandardize(flat, model.standardization).reshape(samples.shape)
    return FunctionalPrediction(mean=mean, weight_mean=mu, weight_scale2=s2, df=m, samples=samples)


def with_lengthscales(model: FlaGPModel, lengthscales) -> FlaGPModel:
    """Copy of ``model`` with the given per-component lengthscales."""
    comps = tuple(
        build_component(model.X, c.w, l, c.nugget) for c, l in zip(model.components, lengthscales)
    )
    return replace(model, components=comps)
