"""SundialModel: patch embedding + causal Transformer + generative head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sundial import nn
from sundial import tensor as T
from sundial.backbone import Backbone, KVCache
from sundial.config import ModelConfig
from sundial.tensor import Tensor
from sundial.timeflow import (
    CosineSchedule,
    FMNet,
    MSEHead,
    ddpm_sample,
    diffusion_objective,
    mse_objective,
    push_forward,
    split_noise,
    timeflow_loss,
)
from sundial.tokenizer import PatchEmbed, SeriesSample


class InputError(ValueError):
    pass


@dataclass
class TokenRepr:
    h: Tensor   # [N, D]


class SundialModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch_len, cfg.d_model, rng)
        self.backbone = Backbone(cfg, rng)
        if cfg.head == "mse":
            self.head = MSEHead(cfg, rng)
        else:
            # the diffusion baseline reuses the same conditional network as a noise predictor
            self.head = FMNet(cfg, rng)
        self.schedule = CosineSchedule(cfg.diffusion_steps) if cfg.head == "diffusion" else None
        self.backbone_calls = 0

    # -- representation --------------------------------------------------------

    def encode(self, patches, mask, key_valid=None, cache: KVCache | None = None) -> Tensor:
        """Patches [B, N, P] (or [N, P]) -> representations [B, N, D] (or [N, D])."""
        patches = np.asarray(patches)
        mask = np.asarray(mask)
        single = patches.ndim == 2
        if single:
            patches, mask = patches[None], mask[None]
        n_points = int(mask[0].sum()) if key_valid is None else None
        if cache is None and n_points is not None and n_points > self.cfg.max_context:
            raise InputError(f"context of {n_points} points exceeds max_context={self.cfg.max_context}")
        self.backbone_calls += 1
        h = self.backbone(self.embed(patches, mask), key_valid, cache)
        return h.reshape(h.shape[1:]) if single else h

    def new_cache(self) -> KVCache:
        return self.backbone.new_cache()

    # -- objectives --------------------------------------------------------------

    def loss(self, batch, rng: np.random.Generator) -> Tensor:
        h = self.encode(batch.patches, batch.mask, batch.key_valid)
        if self.cfg.head == "timeflow":
            return timeflow_loss(h, batch.targets, self.head, rng, valid=batch.target_valid)
        if self.cfg.head == "mse":
            return mse_objective(h, batch.targets, self.head, valid=batch.target_valid)
        return diffusion_objective(h, batch.targets, self.head, rng, valid=batch.target_valid,
                                   schedule=self.schedule)

    # -- generation --------------------------------------------------------------

    def sample(self, h, n_samples: int, steps: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n_samples`` futures per condition row; h [R, D] -> [R, S, F] (normalized units)."""
        h = T.as_tensor(h)
        h = h.reshape(1, -1) if h.ndim == 1 else h
        r, f = h.shape[0], self.cfg.horizon
        if self.cfg.head == "mse":
            with T.no_grad():
                point = self.head(h).data.astype(np.float64)
            return np.repeat(point[:, None, :], n_samples, axis=1)
        rows = T.as_tensor(np.repeat(h.data, n_samples, axis=0))
        noise = split_noise(rng, r * n_samples, f)
        if self.cfg.head == "timeflow":
            out = push_forward(self.head, rows, noise, steps)
        else:
            out = ddpm_sample(self.head, rows, noise, steps, rng, self.schedule)
        return out.reshape(r, n_samples, f)


def count_parameters(cfg: ModelConfig) -> int:
    """Parameter total implied by ``cfg`` without allocating any weights."""
    d, ff, w, f = cfg.d_model, cfg.d_ff, cfg.d_flow, cfg.horizon
    lin = lambda a, b: a * b + b  # noqa: E731
    embed = lin(2 * cfg.patch_len, d) + lin(d, d)
    block = 4 * d + lin(d, 3 * d) + lin(d, d) + lin(d, ff) + lin(ff, d)
    backbone = cfg.n_layers * block + 2 * d
    if cfg.head == "mse":
        head = lin(d, w) + lin(w, f)
    else:
        hidden = cfg.flow_mlp_ratio * w
        flow_block = lin(w, hidden) + lin(hidden, w) + lin(w, 3 * w)
        head = (lin(cfg.time_features, w) + lin(w, w) + lin(d, w) + lin(f, w)
                + cfg.n_flow_blocks * flow_block + lin(w, 2 * w) + lin(w, f))
    return embed + backbone + head


def forward(sample: SeriesSample, model: SundialModel) -> TokenRepr:
    return TokenRepr(model.encode(sample.patches, sample.mask))


def forward_incremental(new_patch, cache: KVCache, model: SundialModel, new_mask=None) -> tuple[Tensor, KVCache]:
    """Append one (or more) patch tokens to ``cache``; returns h of the last new token [D]."""
    p = np.asarray(new_patch, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    m = np.ones_like(p) if new_mask is None else np.asarray(new_mask).reshape(p.shape)
    h = model.encode(p[None], m[None], cache=cache)
    return h.reshape(h.shape[1:])[-1], cache
