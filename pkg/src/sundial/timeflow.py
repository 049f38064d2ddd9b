"""Flow-matching head: conditional velocity network, loss, and Euler sampler.

Also holds the two baseline heads used for objective comparisons: a
deterministic MSE regressor and a DDPM-style noise predictor.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from sundial import nn
from sundial import tensor as T
from sundial.config import ConfigError, ModelConfig
from sundial.tensor import Tensor


class TrainingDataError(ValueError):
    pass


# -- flow path -----------------------------------------------------------------

def interpolate(y, y0, t):
    """Linear path t*y + (1-t)*y0 with one t per row."""
    t_arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("flow time must lie in [0, 1]")
    if isinstance(y, Tensor) or isinstance(y0, Tensor):
        y, y0 = T.as_tensor(y), T.as_tensor(y0)
        tt = T.as_tensor(t_arr.astype(y.dtype).reshape(-1, *([1] * (y.ndim - 1))))
        return tt * y + (1.0 - tt) * y0
    y = np.asarray(y, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    tt = t_arr.reshape(-1, *([1] * (y.ndim - 1))) if y.ndim > 1 else t_arr
    return tt * y + (1.0 - tt) * y0


# -- networks ------------------------------------------------------------------

def fourier_features(t: np.ndarray, n: int, scale: float = 1000.0, max_period: float = 10000.0) -> np.ndarray:
    half = n // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64).reshape(-1, 1) * scale * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


class TimeEmbed(nn.Module):
    def __init__(self, n_features: int, width: int, rng):
        self.n_features = n_features
        self.fc1 = nn.Linear(n_features, width, rng)
        self.fc2 = nn.Linear(width, width, rng)

    def __call__(self, t: np.ndarray) -> Tensor:
        feats = T.as_tensor(fourier_features(t, self.n_features).astype(self.fc1.weight.dtype))
        return self.fc2(T.silu(self.fc1(feats)))


class AdaLNBlock(nn.Module):
    """x + gate * MLP(LN(x) * (1 + scale) + shift); modulation starts at zero."""

    def __init__(self, width: int, ratio: int, rng):
        self.norm = nn.LayerNorm(width, affine=False)
        self.mlp = nn.MLP(width, ratio * width, width, rng)
        self.modulation = nn.Linear(width, 3 * width, rng)
        self.modulation.weight.data[:] = 0.0

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale, gate = T.split(self.modulation(c), 3, axis=-1)
        return x + gate * self.mlp(self.norm(x) * (scale + 1.0) + shift)


class FMNet(nn.Module):
    """Velocity network u(y_t, t | h)."""

    def __init__(self, cfg: ModelConfig, rng):
        w = cfg.d_flow
        self.time_embed = TimeEmbed(cfg.time_features, w, rng)
        self.cond_proj = nn.Linear(cfg.d_model, w, rng)
        self.input_proj = nn.Linear(cfg.horizon, w, rng)
        self.blocks = [AdaLNBlock(w, cfg.flow_mlp_ratio, rng) for _ in range(cfg.n_flow_blocks)]
        self.final_norm = nn.LayerNorm(w, affine=False)
        self.final_modulation = nn.Linear(w, 2 * w, rng)
        self.final_modulation.weight.data[:] = 0.0
        self.output_proj = nn.Linear(w, cfg.horizon, rng)

    def condition(self, t: np.ndarray, h: Tensor) -> Tensor:
        return T.silu(self.cond_proj(h) + self.time_embed(t))

    def __call__(self, y_t, t, h) -> Tensor:
        y_t = T.as_tensor(y_t, dtype=self.input_proj.weight.dtype)
        h = T.as_tensor(h, dtype=self.input_proj.weight.dtype)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (y_t.shape[0],))
        c = self.condition(t, h)
        x = self.input_proj(y_t)
        for blk in self.blocks:
            x = blk(x, c)
        shift, scale = T.split(self.final_modulation(c), 2, axis=-1)
        return self.output_proj(self.final_norm(x) * (scale + 1.0) + shift)


class MSEHead(nn.Module):
    """Deterministic point regressor h -> y."""

    def __init__(self, cfg: ModelConfig, rng):
        self.mlp = nn.MLP(cfg.d_model, cfg.d_flow, cfg.horizon, rng)

    def __call__(self, h) -> Tensor:
        return self.mlp(T.as_tensor(h, dtype=self.mlp.fc1.weight.dtype))


def fmnet_forward(y_t, t, h, net: FMNet) -> Tensor:
    return net(y_t, t, h)


# -- objectives ------------------------------------------------------------------

def _select_rows(h: Tensor, targets: np.ndarray, valid) -> tuple[Tensor, np.ndarray]:
    d = h.shape[-1]
    f = targets.shape[-1]
    h2 = h.reshape(-1, d) if h.ndim != 2 else h
    y = np.asarray(targets).reshape(-1, f)
    if valid is None:
        return h2, y
    rows = np.flatnonzero(np.asarray(valid).reshape(-1))
    if rows.size == 0:
        raise TrainingDataError("no position has a complete future window; context too short for the horizon")
    return T.take_rows(h2, rows), y[rows]


def timeflow_loss(h: Tensor, targets, net: Callable, rng: np.random.Generator | None = None,
                  valid=None, t=None, noise=None) -> Tensor:
    """Mean squared error between predicted and straight-path velocity.

    ``h`` is [..., D], ``targets`` [..., F]; positions with ``valid`` False are
    skipped.  Fresh ``t`` ~ U[0,1] and Gaussian ``noise`` are drawn per row
    unless given (frozen draws make the loss a deterministic function of
    the parameters, which the gradient check needs).
    """
    rows, y = _select_rows(h, targets, valid)
    n, f = y.shape
    if t is None:
        t = rng.random(n)
    if noise is None:
        noise = rng.standard_normal((n, f))
    t = np.asarray(t, dtype=np.float64).reshape(n)
    noise = np.asarray(noise).reshape(n, f)
    dtype = rows.dtype
    y_t = interpolate(y, noise, t).astype(dtype)
    velocity = (y - noise).astype(dtype)
    pred = net(y_t, t, rows)
    diff = pred - velocity
    return T.mean(diff * diff)


def mse_objective(h: Tensor, targets, head: Callable, valid=None) -> Tensor:
    rows, y = _select_rows(h, targets, valid)
    diff = head(rows) - y.astype(rows.dtype)
    return T.mean(diff * diff)


class CosineSchedule:
    """Discrete DDPM noise schedule with cosine cumulative signal level."""

    def __init__(self, n_steps: int = 1000, s: float = 0.008):
        self.n_steps = n_steps
        f = lambda i: np.cos((i / n_steps + s) / (1 + s) * np.pi / 2) ** 2  # noqa: E731
        steps = np.arange(n_steps + 1)
        abar = f(steps) / f(0)
        betas = np.clip(1 - abar[1:] / abar[:-1], 0, 0.999)
        self.betas = betas
        self.alpha_bar = np.cumprod(1 - betas)

    def time(self, step) -> np.ndarray:
        """Network time input in [0, 1]."""
        return np.asarray(step, dtype=np.float64) / self.n_steps


def diffusion_objective(h: Tensor, targets, net: Callable, rng: np.random.Generator | None = None,
                        valid=None, schedule: CosineSchedule | None = None, steps=None, noise=None) -> Tensor:
    """Noise-prediction loss: || eps_theta(sqrt(ab) y + sqrt(1-ab) eps, s | h) - eps ||^2."""
    schedule = schedule or CosineSchedule()
    rows, y = _select_rows(h, targets, valid)
    n, f = y.shape
    if steps is None:
        steps = rng.integers(0, schedule.n_steps, n)
    if noise is None:
        noise = rng.standard_normal((n, f))
    ab = schedule.alpha_bar[np.asarray(steps)].reshape(n, 1)
    x = (np.sqrt(ab) * y + np.sqrt(1 - ab) * noise).astype(rows.dtype)
    pred = net(x, schedule.time(steps), rows)
    diff = pred - noise.astype(rows.dtype)
    return T.mean(diff * diff)


# -- sampling ------------------------------------------------------------------

def split_noise(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """One independent child stream per draw, so draw i never depends on n."""
    return np.stack([child.standard_normal(dim) for child in rng.spawn(n)]) if n else np.zeros((0, dim))


def push_forward(net: Callable, h: Tensor, noise: np.ndarray, steps: int) -> np.ndarray:
    """Euler-integrate dy/dt = net(y, t, h) from t=0 to 1 in ``steps`` uniform steps."""
    if steps < 1:
        raise ConfigError(f"sampling steps must be >= 1, got {steps}")
    dt = 1.0 / steps
    y = np.asarray(noise, dtype=np.float64)
    with T.no_grad():
        for k in range(steps):
            t = np.full(y.shape[0], k * dt)
            u = net(y.astype(h.dtype), t, h).data
            y = y + u.astype(np.float64) * dt
    return y


def ddpm_sample(net: Callable, h: Tensor, noise: np.ndarray, steps: int, rng: np.random.Generator,
                schedule: CosineSchedule | None = None) -> np.ndarray:
    """Strided ancestral sampling over ``steps`` of the schedule's timesteps."""
    schedule = schedule or CosineSchedule()
    if steps < 1:
        raise ConfigError(f"sampling steps must be >= 1, got {steps}")
    taus = np.unique(np.round(np.linspace(0, schedule.n_steps - 1, steps)).astype(int))[::-1]
    x = np.asarray(noise, dtype=np.float64)
    with T.no_grad():
        for i, tau in enumerate(taus):
            ab = schedule.alpha_bar[tau]
            ab_prev = schedule.alpha_bar[taus[i + 1]] if i + 1 < len(taus) else 1.0
            eps = net(x.astype(h.dtype), schedule.time(np.full(x.shape[0], tau)), h).data.astype(np.float64)
            x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
            if i + 1 == len(taus):
                x = x0
                break
            beta = 1 - ab / ab_prev
            mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x
            var = beta * (1 - ab_prev) / (1 - ab)
            x = mean + math.sqrt(var) * rng.standard_normal(x.shape)
    return x


def sample_one(h, steps: int, net: Callable, rng: np.random.Generator) -> np.ndarray:
    """One trajectory from Gaussian noise under condition h [D]."""
    return sample_ensemble(h, 1, steps, net, rng)[0]


def sample_ensemble(h, n_samples: int, steps: int, net: Callable, rng: np.random.Generator,
                    horizon: int | None = None) -> np.ndarray:
    """``n_samples`` trajectories [S, F] sharing the single condition ``h``.

    The condition is computed once by the caller and only repeated here;
    each draw gets its own child random stream.
    """
    if n_samples < 1:
        raise ConfigError(f"need at least one sample, got {n_samples}")
    h = T.as_tensor(h)
    h = h.reshape(1, -1) if h.ndim == 1 else h
    f = horizon if horizon is not None else net.output_proj.weight.shape[1]
    noise = split_noise(rng, n_samples, f)
    rows = T.as_tensor(np.repeat(h.data, n_samples, axis=0))
    return push_forward(net, rows, noise, steps)
