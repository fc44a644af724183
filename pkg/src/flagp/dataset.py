"""Data containers, output standardization, designs and the ball-drop generators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

# Ball-drop field settings used for the unbiased calibration study.
FIELD_DISTANCES = (5.0, 10.0, 15.0, 20.0)
FIELD_RADII = (0.05, 0.10, 0.15, 0.20, 0.25)
FIELD_DRAG = 0.1
GRAVITY = 9.8


class DataError(ValueError):
    """Raised for malformed or degenerate input data."""


@dataclass(frozen=True)
class Standardization:
    """Per-index centering plus a global (or per-index) scale."""

    mean: np.ndarray
    scale: np.ndarray | float

    def apply(self, Z_raw: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z_raw, dtype=float)
        vec = Z.ndim == 1
        if vec:
            Z = Z[:, None]
        _check_rows(Z, self.mean.size)
        out = (Z - self.mean[:, None]) / self._col_scale()
        return out[:, 0] if vec else out

    def _col_scale(self):
        s = np.asarray(self.scale, dtype=float)
        return s[:, None] if s.ndim == 1 else s


def _check_rows(Z, d_y):
    if Z.shape[0] != d_y:
        raise DataError(f"expected {d_y} functional indices, got {Z.shape[0]}")


@dataclass(frozen=True)
class Ensemble:
    """Simulator runs: design on the unit cube and raw functional outputs (d_y x M)."""

    X: np.ndarray
    Z_raw: np.ndarray
    input_ranges: tuple[tuple[float, float], ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.asarray(self.Z_raw, dtype=float)
        if Z.ndim == 1:
            Z = Z[None, :]
        if X.shape[0] != Z.shape[1]:
            raise DataError(f"design has {X.shape[0]} runs but outputs have {Z.shape[1]}")
        if np.any(X < 0.0) or np.any(X > 1.0):
            raise DataError("design must lie in the unit hypercube")
        if len(self.input_ranges) != X.shape[1]:
            raise DataError("one (lo, hi) range is required per input column")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z_raw", Z)
        object.__setattr__(self, "input_ranges", tuple((float(lo), float(hi)) for lo, hi in self.input_ranges))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{k + 1}" for k in range(X.shape[1])))

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def d_y(self) -> int:
        return self.Z_raw.shape[0]


@dataclass(frozen=True)
class FieldData:
    """Field observations. ``X_F`` is on the unit cube, ``Y`` is d_y x n in output units."""

    X_F: np.ndarray
    Y: np.ndarray
    Y_true: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        X_F = np.asarray(self.X_F, dtype=float)
        if X_F.ndim == 1:
            X_F = X_F[:, None]
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X_F.shape[0] != Y.shape[1]:
            raise DataError(f"{X_F.shape[0]} field inputs but {Y.shape[1]} observed curves")
        object.__setattr__(self, "X_F", X_F)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X_F.shape[0]


def standardize(Z_raw, per_index_scale: bool = False) -> tuple[np.ndarray, Standardization]:
    """Center each functional index and scale to unit total variance.

    With ``per_index_scale`` each row is scaled by its own standard deviation
    instead (rows with no spread keep scale 1).
    """
    Z_raw = np.asarray(Z_raw, dtype=float)
    if Z_raw.ndim != 2 or Z_raw.shape[1] < 2:
        raise DataError("need a d_y x M output matrix with M >= 2")
    # exact test: a mean of identical values can leave rounding residue
    if np.all(np.ptp(Z_raw, axis=1) == 0):
        raise DataError("degenerate output: all runs are identical")
    mean = Z_raw.mean(axis=1)
    centered = Z_raw - mean[:, None]
    peak = np.max(np.abs(centered))
    # scaled by the peak so tiny or huge outputs neither underflow nor overflow
    total_sd = peak * np.sqrt(np.mean((centered / peak) ** 2)) if peak > 0 else 0.0
    if not np.isfinite(total_sd) or total_sd < np.finfo(float).tiny:
        raise DataError("degenerate output: spread across runs is below floating-point resolution")
    if per_index_scale:
        scale = centered.std(axis=1)
        scale = np.where(scale > 0.0, scale, 1.0)
    else:
        scale = float(total_sd)
    std = Standardization(mean=mean, scale=scale)
    return std.apply(Z_raw), std


def unstandardize(Z_std, standardization: Standardization) -> np.ndarray:
    Z = np.asarray(Z_std, dtype=float)
    vec = Z.ndim == 1
    if vec:
        Z = Z[:, None]
    _check_rows(Z, standardization.mean.size)
    out = Z * standardization._col_scale() + standardization.mean[:, None]
    return out[:, 0] if vec else out


def _ranges_array(input_ranges):
    r = np.asarray(input_ranges, dtype=float).reshape(-1, 2)
    if np.any(r[:, 0] >= r[:, 1]):
        raise DataError("every input range needs lo < hi")
    return r[:, 0], r[:, 1]


def to_unit_hypercube(X_raw, input_ranges, strict: bool = False) -> np.ndarray:
    lo, hi = _ranges_array(input_ranges)
    X_raw = np.asarray(X_raw, dtype=float)
    if strict and (np.any(X_raw < lo) or np.any(X_raw > hi)):
        raise DataError("input value outside its declared range")
    return (X_raw - lo) / (hi - lo)


def from_unit_hypercube(X, input_ranges) -> np.ndarray:
    lo, hi = _ranges_array(input_ranges)
    return lo + np.asarray(X, dtype=float) * (hi - lo)


def lhs_design(M: int, d: int, seed=None, candidates: int = 50) -> np.ndarray:
    """Maximin Latin hypercube: the best of ``candidates`` random LHS by minimum pairwise distance."""
    rng = np.random.default_rng(seed)
    best, best_score = None, -np.inf
    for _ in range(candidates if M > 1 else 1):
        perms = np.stack([rng.permutation(M) for _ in range(d)], axis=1)
        cand = (perms + rng.random((M, d))) / M
        score = pdist(cand).min() if M > 1 else 0.0
        if score > best_score:
            best, best_score = cand, score
    return best


def _acosh_exp(a):
    # acosh(exp(a)) without overflow for large a
    a = np.asarray(a, dtype=float)
    return a + np.log1p(np.sqrt(-np.expm1(-2.0 * a)))


def ball_drop(C, R, g, d_vec, variant: str = "unbiased") -> np.ndarray:
    """Drop time at each distance in ``d_vec`` for drag ``C``, radius ``R``, gravity ``g``.

    ``variant="biased"`` uses the cube root in the denominator, which gives the
    slightly wrong simulator used for discrepancy studies.
    """
    C, R, g = float(C), float(R), float(g)
    if C <= 0 or R <= 0 or g <= 0:
        raise ValueError("C, R and g must be positive")
    power = {"unbiased": 0.5, "biased": 1.0 / 3.0}[variant]
    d_vec = np.asarray(d_vec, dtype=float)
    return _acosh_exp(C * d_vec / R) / (C * g / R) ** power


def ball_drop_matrix(R, C, g, d_vec, variant="unbiased") -> np.ndarray:
    """Evaluate ``ball_drop`` for each run; returns d_y x M. ``C`` and ``g`` may be per-run arrays."""
    R = np.atleast_1d(np.asarray(R, dtype=float))
    C = np.broadcast_to(np.asarray(C, dtype=float), R.shape)
    g = np.broadcast_to(np.asarray(g, dtype=float), R.shape)
    return np.column_stack([ball_drop(c, r, gg, d_vec, variant) for r, c, gg in zip(R, C, g)])


def make_field_data(
    noise_sd: float = 0.1,
    seed=None,
    radii=FIELD_RADII,
    distances=FIELD_DISTANCES,
    C: float = FIELD_DRAG,
    g: float = GRAVITY,
    radius_range=(0.025, 0.3),
) -> FieldData:
    """Noisy unbiased ball-drop observations (one curve per radius)."""
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    rng = np.random.default_rng(seed)
    truth = ball_drop_matrix(radii, C, g, distances)
    Y = truth + noise_sd * rng.standard_normal(truth.shape) if noise_sd > 0 else truth.copy()
    X_F = to_unit_hypercube(np.asarray(radii, dtype=float)[:, None], [radius_range])
    return FieldData(X_F=X_F, Y=Y, Y_true=truth)
