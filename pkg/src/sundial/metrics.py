"""Point and probabilistic forecast metrics."""

from __future__ import annotations

import math

import numpy as np

DEFAULT_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

SEASONALITY = {"h": 24, "hourly": 24, "d": 7, "daily": 7, "w": 52, "weekly": 52}


class MetricError(ValueError):
    pass


def season_for(freq: str | None) -> int:
    """Seasonal lag used by MASE for a frequency tag; 1 when unknown."""
    if not freq:
        return 1
    return SEASONALITY.get(freq.strip().lower(), 1)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise MetricError(f"length mismatch: prediction {pred.size} vs truth {truth.size}")
    return pred, truth


def mse_mae(pred, truth) -> tuple[float, float]:
    pred, truth = _pair(pred, truth)
    err = pred - truth
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def mase(pred, truth, insample, season: int = 1) -> float:
    """MAE scaled by the in-sample seasonal-naive MAE; +inf when that is zero."""
    pred, truth = _pair(pred, truth)
    insample = np.asarray(insample, dtype=np.float64).reshape(-1)
    if insample.size <= season:
        raise MetricError(f"in-sample length {insample.size} must exceed the season {season}")
    scale = float(np.mean(np.abs(insample[season:] - insample[:-season])))
    mae = float(np.mean(np.abs(pred - truth)))
    if scale == 0.0:
        return 0.0 if mae == 0.0 else math.inf
    return mae / scale


def pinball(forecast, truth, level: float):
    """max(q (y - f), (q - 1)(y - f)), elementwise."""
    diff = np.asarray(truth, dtype=np.float64) - np.asarray(forecast, dtype=np.float64)
    return np.maximum(level * diff, (level - 1) * diff)


def wql(quantiles, truth, levels=DEFAULT_LEVELS) -> float:
    """Weighted quantile loss averaged over levels.

    ``quantiles`` is [n_levels, H]; each level contributes
    2 * sum_t pinball / sum_t |y|.  Returns +inf when sum |y| is zero.
    """
    q = np.asarray(quantiles, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if q.ndim == 1:
        q = q[None]
    if q.shape != (len(levels), truth.size):
        raise MetricError(f"quantile array {q.shape} does not match {len(levels)} levels x {truth.size} steps")
    denom = float(np.sum(np.abs(truth)))
    losses = [2.0 * float(np.sum(pinball(q[i], truth, lv))) for i, lv in enumerate(levels)]
    if denom == 0.0:
        return 0.0 if all(v == 0.0 for v in losses) else math.inf
    return float(np.mean(losses)) / denom


def crps(samples, truth) -> float:
    """Energy-form CRPS: E|X - y| - 0.5 E|X - X'| over the empirical ensemble.

    ``samples`` is [S] for a scalar truth or [S, H] for a length-H truth; the
    score is averaged over horizon steps.
    """
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = y.reshape(1, -1)
    if x.shape[0] < 1:
        raise MetricError("need at least one sample")
    if x.shape[1] != y.shape[1]:
        raise MetricError(f"samples cover {x.shape[1]} steps, truth has {y.shape[1]}")
    term1 = np.mean(np.abs(x - y), axis=0)
    # E|X-X'| from sorted order statistics: sum_{i<j} (x_j - x_i) = sum_i (2i - S + 1) x_(i)
    s = x.shape[0]
    xs = np.sort(x, axis=0)
    weights = (2 * np.arange(s) - s + 1).reshape(-1, 1)
    term2 = 2.0 * np.sum(weights * xs, axis=0) / (s * s)
    return float(np.mean(term1 - 0.5 * term2))


def crps_pairwise(samples, truth) -> float:
    """Same estimator by direct enumeration of all ordered pairs."""
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = y.reshape(1, -1)
    term1 = np.mean(np.abs(x - y), axis=0)
    term2 = np.mean(np.abs(x[:, None, :] - x[None, :, :]), axis=(0, 1))
    return float(np.mean(term1 - 0.5 * term2))
