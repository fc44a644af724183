"""Ball-drop study presets: emulation, unbiased calibration and biased calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import (
    FIELD_DISTANCES,
    GRAVITY,
    Ensemble,
    FieldData,
    ball_drop_matrix,
    from_unit_hypercube,
    lhs_design,
    make_field_data,
    to_unit_hypercube,
)

EMULATION_RANGES = ((0.025, 0.3), (0.05, 0.15))  # (R, C)
EMULATION_DISTANCES = tuple(float(d) for d in range(1, 26))

UNBIASED_RANGES = ((0.025, 0.3), (0.05, 0.15))  # x = R, t = C
UNBIASED_TRUTH = (0.1,)

BIASED_RANGES = ((0.25, 1.75), (0.1, 0.4), (5.0, 20.0))  # x = R, t = (C, g)
BIASED_TRUTH = (0.25, GRAVITY)
BIASED_DISTANCES = tuple(np.linspace(0.25, 25.0, 100))
BIASED_N = 10


@dataclass(frozen=True)
class CalibrationStudy:
    """Simulator ensemble, field data and a noise-free test set.

    ``X_test`` holds field-input rows on the unit cube and ``Y_test`` the true
    curves there (d_y x k). ``theta_true`` is on the unit cube.
    """

    ensemble: Ensemble
    field: FieldData
    X_test: np.ndarray
    Y_test: np.ndarray
    t_dim: int
    theta_true: np.ndarray
    index_values: np.ndarray


def emulation_ensemble(M: int, seed=None, distances=EMULATION_DISTANCES) -> Ensemble:
    """Ball drop over (R, C) with g fixed; outputs are drop times at each distance."""
    X = lhs_design(M, 2, seed=seed)
    raw = from_unit_hypercube(X, EMULATION_RANGES)
    Z = ball_drop_matrix(raw[:, 0], raw[:, 1], GRAVITY, distances)
    return Ensemble(X=X, Z_raw=Z, input_ranges=EMULATION_RANGES, names=("R", "C"))


def emulation_holdout(k: int, seed=None, distances=EMULATION_DISTANCES):
    """Uniform random holdout inputs (unit cube) and their true curves."""
    rng = np.random.default_rng(seed)
    X = rng.random((k, 2))
    raw = from_unit_hypercube(X, EMULATION_RANGES)
    return X, ball_drop_matrix(raw[:, 0], raw[:, 1], GRAVITY, distances)


def unbiased_study(M: int = 242, seed=None, noise_sd: float = 0.1, n_test: int = 100) -> CalibrationStudy:
    ss = np.random.SeedSequence(seed).spawn(2)
    X = lhs_design(M, 2, seed=np.random.default_rng(ss[0]))
    raw = from_unit_hypercube(X, UNBIASED_RANGES)
    Z = ball_drop_matrix(raw[:, 0], raw[:, 1], GRAVITY, FIELD_DISTANCES)
    ens = Ensemble(X=X, Z_raw=Z, input_ranges=UNBIASED_RANGES, names=("R", "C"))
    field = make_field_data(noise_sd=noise_sd, seed=np.random.default_rng(ss[1]), radius_range=UNBIASED_RANGES[0])
    R_test = np.linspace(*UNBIASED_RANGES[0], n_test)
    Y_test = ball_drop_matrix(R_test, UNBIASED_TRUTH[0], GRAVITY, FIELD_DISTANCES)
    X_test = to_unit_hypercube(R_test[:, None], UNBIASED_RANGES[:1])
    theta = to_unit_hypercube(np.array(UNBIASED_TRUTH), UNBIASED_RANGES[1:])
    return CalibrationStudy(ens, field, X_test, Y_test, 1, theta, np.asarray(FIELD_DISTANCES))


def biased_study(M: int = 1058, seed=None, noise_sd: float = 0.1, n_test: int = 100) -> CalibrationStudy:
    """Simulator with the cube-root denominator, field data from the correct model."""
    ss = np.random.SeedSequence(seed).spawn(2)
    X = lhs_design(M, 3, seed=np.random.default_rng(ss[0]))
    raw = from_unit_hypercube(X, BIASED_RANGES)
    Z = ball_drop_matrix(raw[:, 0], raw[:, 1], raw[:, 2], BIASED_DISTANCES, variant="biased")
    ens = Ensemble(X=X, Z_raw=Z, input_ranges=BIASED_RANGES, names=("R", "C", "g"))
    R_field = np.linspace(*BIASED_RANGES[0], BIASED_N)
    truth = ball_drop_matrix(R_field, BIASED_TRUTH[0], BIASED_TRUTH[1], BIASED_DISTANCES)
    rng = np.random.default_rng(ss[1])
    Y = truth + noise_sd * rng.standard_normal(truth.shape)
    field = FieldData(X_F=to_unit_hypercube(R_field[:, None], BIASED_RANGES[:1]), Y=Y, Y_true=truth)
    R_test = np.linspace(0.3, 1.7, n_test)
    Y_test = ball_drop_matrix(R_test, BIASED_TRUTH[0], BIASED_TRUTH[1], BIASED_DISTANCES)
    X_test = to_unit_hypercube(R_test[:, None], BIASED_RANGES[:1])
    theta = to_unit_hypercube(np.array(BIASED_TRUTH), BIASED_RANGES[1:])
    return CalibrationStudy(ens, field, X_test, Y_test, 2, theta, np.asarray(BIASED_DISTANCES))
