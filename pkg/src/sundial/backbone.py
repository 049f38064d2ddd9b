"""Decoder-only Transformer over patch tokens.

Causal multi-head self-attention with rotary position embeddings, Pre-LN
(or Post-LN for ablation) residual blocks, and a key/value cache for
incremental decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sundial import nn
from sundial import tensor as T
from sundial.config import ConfigError, ModelConfig
from sundial.tensor import Tensor

_MASKED = -1e30


class CacheError(RuntimeError):
    pass


# -- rotary embeddings ---------------------------------------------------------

def rope_angles(positions, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [N, dim/2] for pair k rotated by pos * base^(-2k/dim)."""
    if dim % 2:
        raise ConfigError(f"rotary embedding needs an even width, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos * inv_freq
    return np.cos(ang), np.sin(ang)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs of x[..., N, d] by their absolute position."""
    cos, sin = rope_angles(positions, x.shape[-1], base)
    cos = cos.astype(x.dtype)
    sin = sin.astype(x.dtype)
    return Tensor.make(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


def rope_scores(q, k, positions, base: float = 10000.0) -> np.ndarray:
    """Unscaled logits q_i^T R(i-j) k_j for q, k of shape [H, N, d]."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q)
    k = np.asarray(k.data if isinstance(k, Tensor) else k)
    if q.shape[-1] % 2:
        raise ConfigError(f"rotary embedding needs an even head width, got {q.shape[-1]}")
    cos, sin = rope_angles(positions, q.shape[-1], base)
    return _rotate(q, cos, sin) @ np.swapaxes(_rotate(k, cos, sin), -1, -2)


# -- attention -----------------------------------------------------------------

def causal_allowed(n_query: int, n_key: int, key_valid: np.ndarray | None = None) -> np.ndarray:
    """Boolean [B?, n_query, n_key] mask; queries are the last n_query keys.

    Invalid (padding) keys are hidden from every query except themselves, so
    padded rows still produce a finite softmax.
    """
    offset = n_key - n_query
    qi = np.arange(n_query)[:, None] + offset
    kj = np.arange(n_key)[None, :]
    allowed = kj <= qi
    if key_valid is not None:
        allowed = allowed[None] & (key_valid[:, None, :] | (kj == qi)[None])
    return allowed


def _softmax_masked(s: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    s = np.where(allowed, s, _MASKED)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    e = np.where(allowed, e, 0)
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return _softmax_masked((q @ np.swapaxes(k, -1, -2)) * scale, allowed)


def _blocked_forward(q, k, v, allowed, scale, block):
    """Streaming softmax over key blocks; exact up to float rounding."""
    shp = q.shape[:-1]
    m = np.full(shp + (1,), -np.inf, dtype=np.float64)
    denom = np.zeros(shp + (1,), dtype=np.float64)
    acc = np.zeros(shp + (v.shape[-1],), dtype=np.float64)
    for start in range(0, k.shape[-2], block):
        stop = start + block
        s = (q @ np.swapaxes(k[..., start:stop, :], -1, -2)).astype(np.float64) * scale
        ok = allowed[..., start:stop]
        s = np.where(ok, s, -np.inf)
        m_new = np.maximum(m, s.max(axis=-1, keepdims=True))
        safe = np.where(np.isfinite(m_new), m_new, 0.0)
        corr = np.where(np.isfinite(m), np.exp(m - safe), 0.0)
        p = np.exp(s - safe)
        denom = denom * corr + p.sum(axis=-1, keepdims=True)
        acc = acc * corr + p @ v[..., start:stop, :].astype(np.float64)
        m = m_new
    return (acc / denom).astype(q.dtype)


def attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray, block: int = 0) -> Tensor:
    """softmax(mask(q k^T) / sqrt(d)) v for q [B,H,Nq,d], k/v [B,H,Nk,d].

    ``allowed`` broadcasts against [B, H, Nq, Nk].  ``block > 0`` streams the
    forward pass over key blocks; the backward pass recomputes the full
    probabilities either way.
    """
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(qd.shape[-1])
    if allowed.ndim == 3:
        allowed = allowed[:, None]
    probs = None
    if block and block < kd.shape[-2]:
        out = _blocked_forward(qd, kd, vd, allowed, scale, block)
    else:
        probs = _softmax_masked((qd @ np.swapaxes(kd, -1, -2)) * scale, allowed).astype(qd.dtype)
        out = probs @ vd
    nq, nk, d = qd.shape[-2], kd.shape[-2], qd.shape[-1]
    T._state["mult_count"] += int(np.prod(qd.shape[:-2])) * nq * nk * (d + vd.shape[-1])

    def bw(g):
        p = probs
        if p is None:
            p = _softmax_masked((qd @ np.swapaxes(kd, -1, -2)) * scale, allowed).astype(qd.dtype)
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return Tensor.make(out, (q, k, v), bw)


# -- cache ---------------------------------------------------------------------

@dataclass
class KVCache:
    """Per-layer keys (already rotated) and values, each [B, H, n_cached, d]."""

    n_layers: int
    max_tokens: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    n_seen: int = 0       # absolute position of the next token

    def __post_init__(self):
        if not self.keys:
            self.keys = [None] * self.n_layers
            self.values = [None] * self.n_layers

    @property
    def n_cached(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[-2]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if layer >= self.n_layers:
            raise CacheError(f"cache has {self.n_layers} layers, got layer index {layer}")
        if self.keys[layer] is not None:
            k = np.concatenate([self.keys[layer], k], axis=-2)
            v = np.concatenate([self.values[layer], v], axis=-2)
        # sliding window: the oldest entries fall out once max_tokens is reached
        over = k.shape[-2] - self.max_tokens
        if over > 0:
            k, v = k[..., over:, :], v[..., over:, :]
        self.keys[layer], self.values[layer] = k, v
        return k, v

    def repeat(self, n: int) -> "KVCache":
        """Copy a batch-1 cache into n independent rows (one per ensemble member)."""
        rep = lambda a: np.repeat(a, n, axis=0)  # noqa: E731
        return KVCache(self.n_layers, self.max_tokens, [rep(k) for k in self.keys],
                       [rep(v) for v in self.values], self.n_seen)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys + self.values if a is not None)


# -- layers --------------------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.n_heads = cfg.n_heads
        self.rope = cfg.rope_enabled
        self.base = cfg.rope_theta_base
        self.block = cfg.attn_block
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, rng)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, rng, std=0.02 / math.sqrt(2 * cfg.n_layers))

    def __call__(self, x: Tensor, positions: np.ndarray, key_valid=None,
                 cache: KVCache | None = None, layer: int = 0) -> Tensor:
        b, n, dm = x.shape
        h = self.n_heads
        qkv = self.qkv(x).reshape(b, n, 3, h, dm // h).transpose(2, 0, 3, 1, 4)  # [3,B,H,N,d]
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.rope:
            q = apply_rope(q, positions, self.base)
            k = apply_rope(k, positions, self.base)
        if cache is not None:
            kd, vd = cache.append(layer, k.data, v.data)
            k, v = T.as_tensor(kd), T.as_tensor(vd)
            allowed = causal_allowed(n, kd.shape[-2])
        else:
            allowed = causal_allowed(n, n, key_valid)
        o = attention(q, k, v, allowed, self.block)       # [B,H,N,d]
        return self.out(o.transpose(0, 2, 1, 3).reshape(b, n, dm))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff, rng)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model, rng, std=0.02 / math.sqrt(2 * cfg.n_layers))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.pre_ln = cfg.pre_ln
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg, rng)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, rng)

    def __call__(self, x, positions, key_valid=None, cache=None, layer=0):
        if self.pre_ln:
            x = x + self.attn(self.ln1(x), positions, key_valid, cache, layer)
            return x + self.ffn(self.ln2(x))
        x = self.ln1(x + self.attn(x, positions, key_valid, cache, layer))
        return self.ln2(x + self.ffn(x))


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        # only applied under Pre-LN; Post-LN blocks already end normalized
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def new_cache(self) -> KVCache:
        return KVCache(self.cfg.n_layers, self.cfg.max_tokens)

    def __call__(self, x: Tensor, key_valid: np.ndarray | None = None, cache: KVCache | None = None) -> Tensor:
        """x: [B, N, D] embedded tokens -> [B, N, D] final-layer representations."""
        n = x.shape[1]
        if cache is not None:
            if cache.n_layers != len(self.blocks):
                raise CacheError(f"cache built for {cache.n_layers} layers, model has {len(self.blocks)}")
            if key_valid is not None:
                raise CacheError("padded batches are not supported with a cache")
            if n > cache.max_tokens:
                raise CacheError(f"{n} new tokens exceed the cache window of {cache.max_tokens}")
            start = cache.n_seen
        else:
            start = 0
        positions = np.arange(start, start + n)
        for i, blk in enumerate(self.blocks):
            x = blk(x, positions, key_valid, cache, i)
        if cache is not None:
            cache.n_seen += n
        return self.final_norm(x) if self.cfg.pre_ln else x
