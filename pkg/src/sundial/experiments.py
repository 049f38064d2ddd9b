"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from sundial import data, forecast, tensor as T, training
from sundial.config import ModelConfig, TrainConfig, model_config
from sundial.metrics import crps, wql
from sundial.model import SundialModel
from sundial.timeflow import FMNet, MSEHead, mse_objective, push_forward, split_noise, timeflow_loss

TOY_CONTEXT = 512


# -- bimodal target --------------------------------------------------------------

@dataclass
class BimodalResult:
    samples: np.ndarray        # TimeFlow draws, [S]
    mode_fraction: tuple       # (negative, positive)
    mode_means: tuple
    mse_prediction: float
    crps_timeflow: float
    crps_mse: float


def bimodal_targets(rng, n: int, mean: float = 2.0, std: float = 0.1) -> np.ndarray:
    signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return (signs * mean + std * rng.standard_normal(n)).reshape(n, 1)


def _fit(params, loss_fn, steps: int, lr: float, seed: int) -> None:
    cfg = TrainConfig(steps=steps, lr_peak=lr, warmup_steps=min(100, steps), weight_decay=0.0,
                      min_context=1, max_context=1)
    opt = training.AdamW(params, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        for p in params:
            p.grad = None
        loss = loss_fn(rng)
        loss.backward()
        training.clip_grad_norm(params, cfg.grad_clip_norm)
        opt.step(training.lr_at(step, cfg))


def bimodal_experiment(steps: int = 5000, n_samples: int = 2000, flow_steps: int = 50, batch: int = 256,
                       seed: int = 0, lr: float = 1e-3) -> BimodalResult:
    """Fit the flow head and an MSE head to a +-2 mixture under one fixed condition."""
    cfg = ModelConfig(horizon=1, d_model=16, n_heads=2, d_flow=64, n_flow_blocks=2, flow_mlp_ratio=2,
                      n_layers=1, d_ff=16, seed=seed)
    rng = np.random.default_rng(seed)
    h = T.Tensor(rng.standard_normal((1, cfg.d_model)))
    net = FMNet(cfg, np.random.default_rng(seed + 1))
    head = MSEHead(cfg, np.random.default_rng(seed + 2))
    data_rng = np.random.default_rng(seed + 3)
    rows = T.Tensor(np.repeat(h.data, batch, axis=0))

    _fit(net.parameters(), lambda r: timeflow_loss(rows, bimodal_targets(data_rng, batch), net, r), steps, lr, seed)
    _fit(head.parameters(), lambda r: mse_objective(rows, bimodal_targets(data_rng, batch), head), steps, lr, seed)

    cond = T.Tensor(np.repeat(h.data, n_samples, axis=0))
    draws = push_forward(net, cond, split_noise(np.random.default_rng(seed + 4), n_samples, 1), flow_steps)[:, 0]
    with T.no_grad():
        point = float(head(h).data[0, 0])
    neg, pos = draws[draws < 0], draws[draws >= 0]
    truth = bimodal_targets(np.random.default_rng(seed + 5), 500)[:, 0]
    crps_tf = float(np.mean([crps(draws, y) for y in truth]))
    crps_mse = float(np.mean(np.abs(point - truth)))
    return BimodalResult(draws, (neg.size / n_samples, pos.size / n_samples),
                         (float(neg.mean()) if neg.size else np.nan, float(pos.mean()) if pos.size else np.nan),
                         point, crps_tf, crps_mse)


# -- toy forecasting ---------------------------------------------------------------

def toy_corpora(seed: int = 0, n_train: int = 200, n_test: int = 50, length: int = 1024):
    return data.synth_corpus(seed * 2 + 1, n_train, length), data.synth_corpus(seed * 2 + 2, n_test, length)


def waveform_corpus(seed: int, count: int, length: int = 1024, prefix: str = "w") -> list:
    """Square and sawtooth waves with random period, phase and amplitude.

    KernelSynth never produces these shapes, so a model pre-trained on it
    faces a genuine distribution shift here.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        period = int(rng.integers(16, 65))
        t = np.arange(length) + int(rng.integers(0, period))
        if rng.integers(2):
            base = (t % period) / period * 2 - 1
        else:
            base = np.where(t % period < period / 2, 1.0, -1.0)
        values = base * rng.uniform(0.5, 2.0) + 0.1 * rng.standard_normal(length)
        out.append(data.SeriesRecord(f"{prefix}{i}", values))
    return out


def toy_train_config(steps: int, seed: int = 0, batch_size: int = 16, max_context: int = TOY_CONTEXT) -> TrainConfig:
    return TrainConfig(batch_size=batch_size, steps=steps, lr_peak=1e-3, warmup_steps=min(100, steps),
                       min_context=min(48, max_context), max_context=max_context, seed=seed)


def train_toy(config: str | ModelConfig = "toy", steps: int = 3000, corpus=None, seed: int = 0,
              log_path=None) -> tuple[SundialModel, list]:
    cfg = model_config(config) if isinstance(config, str) else config
    model = SundialModel(cfg.replace(seed=seed))
    if corpus is None:
        corpus = toy_corpora(seed)[0]
    tcfg = toy_train_config(steps, seed, max_context=min(TOY_CONTEXT, cfg.max_context))
    history = training.train(model, corpus, tcfg, log_path=log_path)
    return model, history


def holdout_split(record, horizon: int, context: int = TOY_CONTEXT):
    v = np.asarray(record.values)
    return v[-(context + horizon):-horizon], v[-horizon:]


def evaluate_toy(model: SundialModel, test, horizon: int | None = None, n_samples: int = 20, steps: int = 50,
                 seed: int = 0) -> dict[str, float]:
    """Mean metrics over held-out tails, plus the last-value persistence baseline."""
    horizon = horizon or model.cfg.horizon
    out = {"mse": [], "persistence_mse": [], "wql": [], "crps": []}
    for i, rec in enumerate(test):
        ctx, truth = holdout_split(rec, horizon)
        ens = forecast.rolling_forecast(ctx, horizon, model, n_samples, steps, np.random.default_rng([seed, i]))
        out["mse"].append(np.mean((ens.median - truth) ** 2))
        out["persistence_mse"].append(np.mean((ctx[-1] - truth) ** 2))
        out["wql"].append(wql(ens.quantiles, truth, ens.quantile_levels))
        out["crps"].append(crps(ens.samples, truth))
    return {k: float(np.mean(v)) for k, v in out.items()}


def smoothed_final_loss(history, window: int = 200) -> float:
    return float(np.mean([r[1] for r in history[-window:]]))


# -- KV cache ---------------------------------------------------------------------

def decode_costs(model: SundialModel, n_tokens: int, seed: int = 0) -> dict[str, float]:
    """Multiplies and wall time: incremental cached decoding vs a full forward per prefix."""
    rng = np.random.default_rng(seed)
    p = model.cfg.patch_len
    patches = rng.standard_normal((n_tokens, p))
    mask = np.ones_like(patches)
    with T.no_grad():
        T.reset_mult_count()
        t0 = time.perf_counter()
        cache = model.new_cache()
        inc = [model.encode(patches[i:i + 1], mask[i:i + 1], cache=cache).data[-1] for i in range(n_tokens)]
        t_inc = time.perf_counter() - t0
        m_inc = T.mult_count()
        T.reset_mult_count()
        t0 = time.perf_counter()
        full = [model.encode(patches[:i + 1], mask[:i + 1]).data[-1] for i in range(n_tokens)]
        t_full = time.perf_counter() - t0
        m_full = T.mult_count()
    diff = float(np.max(np.abs(np.array(inc) - np.array(full))))
    return {"max_abs_diff": diff, "mults_cached": m_inc, "mults_full": m_full, "time_cached": t_inc,
            "time_full": t_full, "cache_bytes": cache.nbytes()}


# -- ablations ---------------------------------------------------------------------

def ablation(toggle: str, corpus=None, config: str = "toy", steps: int = 1000, seed: int = 0,
             horizon: int = 96, n_samples: int = 20) -> list[tuple[str, str, float]]:
    """Compare the default model with one mechanism switched off."""
    base_cfg = model_config(config).replace(seed=seed)
    train_c, test_c = toy_corpora(seed) if corpus is None else (corpus, corpus[-20:])
    test_c = test_c[:20]
    rows = []
    if toggle == "kv_cache":
        model, _ = train_toy(base_cfg, steps, train_c, seed)
        for variant, flag in (("kv_cache_on", True), ("kv_cache_off", False)):
            T.reset_mult_count()
            t0 = time.perf_counter()
            for i, rec in enumerate(test_c):
                ctx, _ = holdout_split(rec, horizon)
                forecast.generate(model, ctx, horizon, n_samples, rng=np.random.default_rng([seed, i]),
                                  use_cache=flag)
            rows.append((variant, "inference_s", time.perf_counter() - t0))
            rows.append((variant, "mults", float(T.mult_count())))
        return rows
    field = {"rope": "rope_enabled", "pre_ln": "pre_ln"}[toggle]
    for variant, flag in ((f"{toggle}_on", True), (f"{toggle}_off", False)):
        model, history = train_toy(base_cfg.replace(**{field: flag}), steps, train_c, seed)
        rows.append((variant, "final_train_loss", smoothed_final_loss(history)))
        for name, val in evaluate_toy(model, test_c, min(horizon, model.cfg.horizon), n_samples, seed=seed).items():
            rows.append((variant, name, val))
    return rows


__all__ = [
    "BimodalResult", "bimodal_experiment", "toy_corpora", "train_toy", "evaluate_toy", "decode_costs",
    "ablation", "smoothed_final_loss", "waveform_corpus",
]
