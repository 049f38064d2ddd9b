"""Instance normalization, left-padded patching, and the patch embedding MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sundial import nn
from sundial import tensor as T
from sundial.config import ConfigError
from sundial.tensor import Tensor

EPS = 1e-5


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass
class SeriesSample:
    values: np.ndarray        # normalized context, length T
    stats: NormStats
    patches: np.ndarray       # [N, P]
    mask: np.ndarray          # [N, P], 1 = observed

    @property
    def n_tokens(self) -> int:
        return self.patches.shape[0]

    @classmethod
    def from_raw(cls, raw, patch_len: int) -> "SeriesSample":
        values, stats = normalize(raw)
        patches, mask = patchify(values, patch_len)
        return cls(values, stats, patches, mask)


def _check_finite(values: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(f"non-finite value at index {int(bad[0])}")


def normalize(values) -> tuple[np.ndarray, NormStats]:
    """Standardize with the population std, clamped below at ``EPS``."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DataError("cannot normalize an empty series")
    _check_finite(x)
    mu = float(x.mean())
    sd = max(float(x.std()), EPS)
    return (x - mu) / sd, NormStats(mu, sd)


def denormalize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


def patchify(values, patch_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad to a multiple of ``patch_len`` and cut into [N, P] rows.

    Returns (patches, mask); padded slots hold 0 with mask 0.
    """
    if patch_len < 1:
        raise ConfigError(f"patch length must be >= 1, got {patch_len}")
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    n = -(-x.size // patch_len)
    if n == 0:
        raise DataError("cannot patchify an empty series")
    pad = n * patch_len - x.size
    patches = np.zeros(n * patch_len)
    mask = np.zeros(n * patch_len)
    patches[pad:] = x
    mask[pad:] = 1.0
    return patches.reshape(n, patch_len), mask.reshape(n, patch_len)


def unpatchify(patches: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.asarray(patches).reshape(-1)[np.asarray(mask).reshape(-1) > 0]


class PatchEmbed(nn.Module):
    """Shared MLP R^{2P} -> R^D applied to [patch || mask]."""

    def __init__(self, patch_len: int, d_model: int, rng: np.random.Generator):
        self.patch_len = patch_len
        self.mlp = nn.MLP(2 * patch_len, d_model, d_model, rng)

    def __call__(self, patches, mask) -> Tensor:
        patches = np.asarray(patches)
        mask = np.asarray(mask)
        if patches.shape[-1] != self.patch_len or mask.shape != patches.shape:
            raise ConfigError(
                f"patch shape {patches.shape} / mask {mask.shape} incompatible with patch_len={self.patch_len}"
            )
        dtype = self.mlp.fc1.weight.dtype
        x = T.as_tensor(np.concatenate([patches, mask], axis=-1).astype(dtype))
        return self.mlp(x)


def embed_patches(patches, mask, model) -> Tensor:
    """Embed [N, P] patches (or a batch [B, N, P]) with the model's PatchEmbed."""
    return model.embed(patches, mask)
