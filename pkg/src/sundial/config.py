"""Model and training configurations, plus the named presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


HEADS = ("timeflow", "mse", "diffusion")


@dataclass(frozen=True)
class ModelConfig:
    patch_len: int = 16           # P
    max_context: int = 2880       # T_max, in time points
    horizon: int = 720            # F, points generated per step
    n_layers: int = 12            # L
    d_model: int = 768            # D
    d_ff: int = 3072              # D_ff
    n_heads: int = 12             # H
    d_flow: int = 768             # D_tf
    n_flow_blocks: int = 3        # L_tf
    flow_mlp_ratio: int = 4
    time_features: int = 64
    k_default: int = 50
    rope_enabled: bool = True
    pre_ln: bool = True
    use_kv_cache: bool = True
    rope_theta_base: float = 10000.0
    attn_block: int = 0           # >0 selects blocked attention with this key-block size
    head: str = "timeflow"
    diffusion_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.patch_len < 1:
            raise ConfigError(f"patch_len must be >= 1, got {self.patch_len}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.rope_enabled and self.head_dim % 2:
            raise ConfigError(f"rotary embedding needs an even head width, got {self.head_dim}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.horizon < 1 or self.max_context < 1:
            raise ConfigError("horizon and max_context must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_tokens(self) -> int:
        return -(-self.max_context // self.patch_len)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> str:
        """Canonical encoding: sorted keys, no whitespace."""
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 1000
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    min_context: int = 64
    max_context: int = 512
    objective: str = "timeflow"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    min_lr_ratio: float = 0.1
    series_weights: tuple | None = field(default=None)

    def __post_init__(self):
        if self.objective not in HEADS:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.min_context > self.max_context:
            raise ConfigError("min_context exceeds max_context")

    def validate_for(self, model: ModelConfig) -> None:
        if self.min_context < model.patch_len + model.horizon:
            raise ConfigError(
                f"min_context={self.min_context} < patch_len+horizon={model.patch_len + model.horizon}; "
                "no position would carry a full target"
            )
        if self.max_context > model.max_context:
            raise ConfigError(f"max_context={self.max_context} exceeds model max_context={model.max_context}")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_TABLE3 = dict(patch_len=16, max_context=2880, horizon=720)

PRESETS: dict[str, ModelConfig] = {
    "small": ModelConfig(**_TABLE3, n_layers=6, d_model=512, d_ff=2048, n_heads=8, d_flow=512, n_flow_blocks=3),
    "base": ModelConfig(**_TABLE3, n_layers=12, d_model=768, d_ff=3072, n_heads=12, d_flow=768, n_flow_blocks=3),
    "large": ModelConfig(**_TABLE3, n_layers=24, d_model=1024, d_ff=4096, n_heads=16, d_flow=1024, n_flow_blocks=6),
    # desk-scale configurations
    "tiny": ModelConfig(patch_len=4, max_context=64, horizon=4, n_layers=1, d_model=8, d_ff=16, n_heads=2,
                        d_flow=8, n_flow_blocks=1, flow_mlp_ratio=2, time_features=8),
    "toy": ModelConfig(patch_len=16, max_context=512, horizon=32, n_layers=2, d_model=64, d_ff=256, n_heads=4,
                       d_flow=64, n_flow_blocks=2, flow_mlp_ratio=2),
    "toy-large": ModelConfig(patch_len=16, max_context=512, horizon=32, n_layers=4, d_model=128, d_ff=512,
                             n_heads=4, d_flow=128, n_flow_blocks=2, flow_mlp_ratio=2),
}


def model_config(name_or_path: str) -> ModelConfig:
    """Resolve a preset name or a JSON file into a ModelConfig."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    with open(name_or_path, encoding="utf-8") as fh:
        d = json.load(fh)
    base = d.pop("preset", None)
    if base is not None:
        return PRESETS[base].replace(**d)
    return ModelConfig.from_dict(d)
