"""Prediction scores: MAPE, RMSE, interval score and empirical coverage."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

ZERO_TRUTH = 1e-12


def _same_shape(*arrays):
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("length mismatch: " + ", ".join(str(a.shape) for a in arrays))
    return arrays


def interval_score(lower, upper, y, alpha: float = 0.05):
    """Interval score ``(u - l) + 2/alpha * (l - y)[y < l] + 2/alpha * (y - u)[y > u]``.

    Works elementwise; returns a float for scalar input.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    l, u, y = _same_shape(lower, upper, y)
    if np.any(l > u):
        raise ValueError("interval lower bound exceeds upper bound")
    below = np.where(y < l, l - y, 0.0)
    above = np.where(y > u, y - u, 0.0)
    score = (u - l) + (2.0 / alpha) * (below + above)
    return float(score) if score.ndim == 0 else score


def mape_with_mask(pred, truth) -> tuple[float, int]:
    """MAPE over entries with ``|truth| >= 1e-12`` and the number of entries masked out."""
    p, t = _same_shape(pred, truth)
    keep = np.abs(t) >= ZERO_TRUTH
    if not np.any(keep):
        raise ValueError("every truth value is zero; MAPE is undefined")
    return float(np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep]))), int(np.count_nonzero(~keep))


def mape(pred, truth) -> float:
    return mape_with_mask(pred, truth)[0]


def rmse(pred, truth) -> float:
    p, t = _same_shape(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def coverage(lows, highs, truths) -> float:
    l, u, t = _same_shape(lows, highs, truths)
    if l.size == 0:
        raise ValueError("coverage of an empty set")
    return float(np.mean((t >= l) & (t <= u)))


@dataclass(frozen=True)
class ScoreReport:
    mape: float
    rmse: float
    interval_score: float
    coverage_95: float
    n_masked: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def score(mean, lower, upper, truth, alpha: float = 0.05) -> ScoreReport:
    """All scores at once; the interval score is averaged over entries."""
    m, n_masked = mape_with_mask(mean, truth)
    return ScoreReport(
        mape=m,
        rmse=rmse(mean, truth),
        interval_score=float(np.mean(interval_score(lower, upper, truth, alpha))),
        coverage_95=coverage(lower, upper, truth),
        n_masked=n_masked,
    )
