"""Batching, optimization, gradient checking, and fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from sundial import tensor as T
from sundial.config import ModelConfig, TrainConfig
from sundial.model import SundialModel
from sundial.tokenizer import DataError, normalize, patchify

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


# -- batches -------------------------------------------------------------------

@dataclass
class Batch:
    patches: np.ndarray        # [B, N, P]
    mask: np.ndarray           # [B, N, P]
    key_valid: np.ndarray      # [B, N] False for whole padding tokens
    targets: np.ndarray        # [B, N, F] normalized with each context's stats
    target_valid: np.ndarray   # [B, N]
    lengths: list = field(default_factory=list)
    series_index: list = field(default_factory=list)


def _values(item) -> np.ndarray:
    return np.asarray(getattr(item, "values", item), dtype=np.float64)


def make_window(series: np.ndarray, offset: int, length: int, patch_len: int, horizon: int):
    """Context window + per-token future targets from one series.

    Token i's target is the ``horizon`` points after the token's last point,
    taken from the series (they may run past the window); tokens whose
    future would run past the end of the series are marked invalid.
    """
    ctx = series[offset: offset + length]
    normed, stats = normalize(ctx)
    patches, mask = patchify(normed, patch_len)
    n = patches.shape[0]
    pad = n * patch_len - length
    ends = offset + (np.arange(1, n + 1) * patch_len - pad)
    valid = ends + horizon <= series.size
    targets = np.zeros((n, horizon))
    for i in np.flatnonzero(valid):
        targets[i] = (series[ends[i]: ends[i] + horizon] - stats.mean) / stats.std
    return patches, mask, targets, valid


def make_batch(corpus, mcfg: ModelConfig, tcfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Draw ``batch_size`` random windows of random length from random series."""
    series = [_values(s) for s in corpus]
    if not series:
        raise DataError("corpus is empty")
    ok = [i for i, s in enumerate(series) if s.size >= tcfg.min_context]
    if not ok:
        longest = max(s.size for s in series)
        raise DataError(f"no series reaches min_context={tcfg.min_context} (longest has {longest}, "
                        f"short by {tcfg.min_context - longest})")
    probs = None
    if tcfg.series_weights is not None:
        w = np.asarray(tcfg.series_weights, dtype=np.float64)[ok]
        probs = w / w.sum()
    p, f = mcfg.patch_len, mcfg.horizon
    items, lengths, picked = [], [], []
    for _ in range(tcfg.batch_size):
        idx = ok[int(rng.choice(len(ok), p=probs))]
        s = series[idx]
        hi = min(tcfg.max_context, s.size)
        length = int(rng.integers(tcfg.min_context, hi + 1))
        offset = int(rng.integers(0, s.size - length + 1))
        items.append(make_window(s, offset, length, p, f))
        lengths.append(length)
        picked.append(idx)
    n_max = max(it[0].shape[0] for it in items)
    b = len(items)
    patches = np.zeros((b, n_max, p))
    mask = np.zeros((b, n_max, p))
    key_valid = np.zeros((b, n_max), dtype=bool)
    targets = np.zeros((b, n_max, f))
    target_valid = np.zeros((b, n_max), dtype=bool)
    for j, (pa, ma, ta, va) in enumerate(items):
        lo = n_max - pa.shape[0]
        patches[j, lo:], mask[j, lo:], targets[j, lo:], target_valid[j, lo:] = pa, ma, ta, va
        key_valid[j, lo:] = True
    return Batch(patches, mask, key_valid, targets, target_valid, lengths, picked)


# -- optimizer -------------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then cosine decay to min_lr_ratio * lr_peak."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    floor = cfg.min_lr_ratio * cfg.lr_peak
    return floor + (cfg.lr_peak - floor) * 0.5 * (1 + math.cos(math.pi * frac))


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices (not biases/norms)."""

    def __init__(self, params, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1 - lr * self.wd
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is <= max_norm; returns the pre-clip norm."""
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def train_step(model: SundialModel, batch: Batch, opt: AdamW, cfg: TrainConfig, step: int,
               rng: np.random.Generator) -> tuple[float, float]:
    model.zero_grad()
    loss = model.loss(batch, rng)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite loss {value} at step {step}")
    loss.backward()
    norm = clip_grad_norm(opt.params, cfg.grad_clip_norm)
    if not math.isfinite(norm):
        raise TrainingAborted(f"non-finite gradient norm at step {step}")
    opt.step(lr_at(step, cfg))
    return value, norm


class LossLog:
    """Append-only ``step,loss,lr,grad_norm`` text log."""

    HEADER = "step,loss,lr,grad_norm\n"

    def __init__(self, path):
        self.path = path
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        self.fh = open(path, "a", encoding="utf-8")
        if new:
            self.fh.write(self.HEADER)

    def write(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        self.fh.write(f"{step},{loss:.9g},{lr:.9g},{grad_norm:.9g}\n")

    def close(self) -> None:
        self.fh.close()


def train(model: SundialModel, corpus, cfg: TrainConfig, log_path=None, start_step: int = 0,
          progress_every: int = 0) -> list[tuple[int, float, float, float]]:
    """Run ``cfg.steps`` optimizer steps; returns (step, loss, lr, grad_norm) records."""
    cfg.validate_for(model.cfg)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng, noise_rng = (np.random.default_rng(s) for s in seeds)
    opt = AdamW(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    writer = LossLog(log_path) if log_path else None
    history = []
    try:
        for step in range(start_step, start_step + cfg.steps):
            batch = make_batch(corpus, model.cfg, cfg, data_rng)
            loss, norm = train_step(model, batch, opt, cfg, step - start_step, noise_rng)
            rec = (step, loss, lr_at(step - start_step, cfg), norm)
            history.append(rec)
            if writer:
                writer.write(*rec)
            if progress_every and step % progress_every == 0:
                log.info("step %d loss %.4f lr %.2e |g| %.3f", *rec)
    finally:
        if writer:
            writer.close()
    return history


# -- gradient check --------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: str
    unreachable: list

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self) -> list[str]:
        return [
            f"checked {self.n_checked} parameters",
            f"max relative error {self.max_rel_error:.3e} (worst: {self.worst})",
            f"unreachable tensors with exact zero gradient: {', '.join(self.unreachable) or 'none'}",
            "PASS" if self.passed else "FAIL",
        ]


def grad_check(model: SundialModel, batch: Batch, tolerance: float = 1e-3, n_params: int = 200,
               seed: int = 0, step: float = 1e-4, jitter: float = 0.05) -> GradCheckReport:
    """Compare backprop gradients of the TimeFlow loss with central differences.

    Runs on a float64 copy of ``model``.  ``jitter`` perturbs the copy's
    weights so zero-initialized modulation paths carry gradient too.  Flow
    times and noise are drawn once and frozen.
    """
    rng = np.random.default_rng(seed)
    m = copy.deepcopy(model).astype(np.float64)
    for p in m.parameters():
        p.data += jitter * rng.standard_normal(p.shape)
    rows = int(batch.target_valid.sum())
    t_frozen = rng.random(rows)
    noise = rng.standard_normal((rows, m.cfg.horizon))
    from sundial.timeflow import timeflow_loss

    def loss_fn():
        h = m.encode(batch.patches, batch.mask, batch.key_valid)
        return timeflow_loss(h, batch.targets, m.head, valid=batch.target_valid, t=t_frozen, noise=noise)

    m.zero_grad()
    loss_fn().backward()
    named = list(m.named_parameters())
    unreachable = [name for name, p in named if p.grad is None]
    sizes = np.array([p.size for _, p in named])
    flat = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst, worst_name = 0.0, ""
    with T.no_grad():
        for j in np.sort(flat):
            ti = int(np.searchsorted(bounds, j, side="right"))
            k = int(j - (bounds[ti - 1] if ti else 0))
            name, p = named[ti]
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[k])
            view = p.data.reshape(-1)
            orig = view[k]
            view[k] = orig + step
            up = loss_fn().item()
            view[k] = orig - step
            down = loss_fn().item()
            view[k] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(analytic), abs(numeric), 1e-7)
            err = abs(analytic - numeric) / denom
            if err > worst:
                worst, worst_name = err, f"{name}[{k}]"
    return GradCheckReport(worst, len(flat), tolerance, worst_name, unreachable)


# -- fine-tuning -----------------------------------------------------------------

def fine_tune(model: SundialModel, corpus, cfg: TrainConfig, expected: ModelConfig | None = None,
              lr_scale: float = 0.1, log_path=None) -> SundialModel:
    """Continue training a loaded model with fresh optimizer state and a lower peak LR."""
    if expected is not None:
        a, b = expected.__dict__, model.cfg.__dict__
        diff = [k for k in a if k != "seed" and a[k] != b[k]]
        if diff:
            raise CheckpointMismatch(f"architecture mismatch in fields: {', '.join(diff)}")
    tuned = copy.deepcopy(model)
    if cfg.steps > 0:
        train(tuned, corpus, cfg.replace(lr_peak=cfg.lr_peak * lr_scale), log_path=log_path)
    return tuned
