"""Ensemble generation for a raw context, quantile summaries, and report files."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sundial import tensor as T
from sundial.metrics import DEFAULT_LEVELS, MetricError, crps, mase, mse_mae, season_for, wql
from sundial.model import InputError, SundialModel
from sundial.tokenizer import denormalize, normalize, patchify


@dataclass
class ForecastEnsemble:
    samples: np.ndarray             # [S, H] in series units
    quantile_levels: tuple
    quantiles: np.ndarray           # [n_levels, H]
    median: np.ndarray              # [H]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def quantile(self, level: float) -> np.ndarray:
        return self.quantiles[list(self.quantile_levels).index(level)]


def summarize(samples, levels=DEFAULT_LEVELS) -> ForecastEnsemble:
    """Empirical quantiles (linear interpolation between order statistics)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise MetricError("cannot summarize an empty sample set")
    levels = tuple(float(v) for v in levels)
    if list(levels) != sorted(levels) or any(not 0 < v < 1 for v in levels):
        raise MetricError(f"quantile levels must be sorted and inside (0, 1): {levels}")
    q = np.quantile(x, levels, axis=0, method="linear")
    med = np.quantile(x, 0.5, axis=0, method="linear")
    return ForecastEnsemble(x, levels, q, med)


def _encode_last(model: SundialModel, series: np.ndarray, cache=None) -> T.Tensor:
    patches, mask = patchify(series, model.cfg.patch_len)
    with T.no_grad():
        h = model.encode(patches[None], mask[None], cache=cache)
    return h[:, -1]


def generate(model: SundialModel, context, horizon: int, n_samples: int = 20, steps: int | None = None,
             rng: np.random.Generator | None = None, use_cache: bool | None = None) -> np.ndarray:
    """Sample ``n_samples`` trajectories of length ``horizon`` in series units.

    One backbone pass conditions the first ``F`` points of every member.
    Longer horizons roll forward: each member appends its own generated
    points and is re-encoded (incrementally when a KV cache applies).
    """
    ctx = np.asarray(context, dtype=np.float64).reshape(-1)
    if ctx.size < 1:
        raise InputError("context must hold at least one point")
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    cfg = model.cfg
    steps = cfg.k_default if steps is None else steps
    rng = rng if rng is not None else np.random.default_rng(0)
    normed, stats = normalize(ctx)
    normed = normed[-cfg.max_context:]
    rounds = math.ceil(horizon / cfg.horizon)
    if use_cache is None:
        use_cache = cfg.use_kv_cache
    use_cache = use_cache and rounds > 1 and cfg.horizon % cfg.patch_len == 0

    cache = model.new_cache() if use_cache else None
    h = _encode_last(model, normed, cache)                    # [1, D]
    pieces = [model.sample(h, n_samples, steps, rng)[0]]      # [S, F]
    if use_cache:
        cache = cache.repeat(n_samples)
    for _ in range(rounds - 1):
        last = pieces[-1]
        if use_cache:
            new = last.reshape(n_samples, -1, cfg.patch_len)
            with T.no_grad():
                h = model.encode(new, np.ones_like(new), cache=cache)[:, -1]
        else:
            hist = np.concatenate([np.repeat(normed[None], n_samples, 0)] + pieces, axis=1)
            hist = hist[:, -cfg.max_context:]
            pa = np.stack([patchify(row, cfg.patch_len)[0] for row in hist])
            ma = np.stack([patchify(row, cfg.patch_len)[1] for row in hist])
            with T.no_grad():
                h = model.encode(pa, ma)[:, -1]
        pieces.append(model.sample(h, 1, steps, rng)[:, 0])
    traj = np.concatenate(pieces, axis=1)[:, :horizon]
    return denormalize(traj, stats)


def rolling_forecast(context, horizon: int, model: SundialModel, n_samples: int = 20, steps: int | None = None,
                     rng: np.random.Generator | None = None, levels=DEFAULT_LEVELS,
                     use_cache: bool | None = None) -> ForecastEnsemble:
    return summarize(generate(model, context, horizon, n_samples, steps, rng, use_cache), levels)


# -- evaluation ---------------------------------------------------------------------

METRICS = ("mse", "mae", "mase", "wql", "crps")


def score(ens: ForecastEnsemble, truth, insample, metrics=METRICS, season: int = 1) -> dict[str, float]:
    """Point metrics use the ensemble median."""
    out = {}
    mse, mae = mse_mae(ens.median, truth)
    for name in metrics:
        if name == "mse":
            out[name] = mse
        elif name == "mae":
            out[name] = mae
        elif name == "mase":
            out[name] = mase(ens.median, truth, insample, season)
        elif name == "wql":
            out[name] = wql(ens.quantiles, truth, ens.quantile_levels)
        elif name == "crps":
            out[name] = crps(ens.samples, truth)
        else:
            raise MetricError(f"unknown metric {name!r}")
    return out


def evaluate_corpus(model: SundialModel, records, horizon: int, n_samples: int = 20, steps: int | None = None,
                    metrics=METRICS, seed: int = 0, levels=DEFAULT_LEVELS) -> list[tuple[str, str, float]]:
    """Hold out the last ``horizon`` points of each series and score the forecast.

    Returns (id, metric, value) rows followed by one aggregate row per metric
    (mean over series with a finite value).
    """
    rows = []
    per_metric: dict[str, list[float]] = {m: [] for m in metrics}
    for i, rec in enumerate(records):
        values = np.asarray(rec.values, dtype=np.float64)
        if values.size <= horizon + 1:
            raise InputError(f"series {rec.id!r} too short for horizon {horizon}")
        context, truth = values[:-horizon], values[-horizon:]
        rng = np.random.default_rng([seed, i])
        ens = rolling_forecast(context, horizon, model, n_samples, steps, rng, levels)
        season = season_for(getattr(rec, "freq", None))
        if context.size <= season:
            season = 1
        for name, val in score(ens, truth, context, metrics, season).items():
            rows.append((rec.id, name, val))
            per_metric[name].append(val)
    for name in metrics:
        finite = [v for v in per_metric[name] if math.isfinite(v)]
        rows.append(("__all__", name, float(np.mean(finite)) if finite else math.inf))
    return rows


def write_report(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,metric,value\n")
        for rid, name, val in rows:
            fh.write(f"{rid},{name},{val:.9g}\n")


def write_forecasts(items, path, levels=DEFAULT_LEVELS) -> None:
    """items: iterable of (id, ForecastEnsemble)."""
    lines = ["id,step,mean," + ",".join(f"q{lv:g}" for lv in levels) + ",median\n"]
    for rid, ens in items:
        mean = ens.mean
        for t in range(ens.median.size):
            qs = ",".join(f"{ens.quantiles[i, t]:.9g}" for i in range(len(levels)))
            lines.append(f"{rid},{t + 1},{mean[t]:.9g},{qs},{ens.median[t]:.9g}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
