"""Patch-tokenized causal Transformer forecaster with a flow-matching head."""

from sundial.config import PRESETS, ConfigError, ModelConfig, TrainConfig, model_config
from sundial.forecast import ForecastEnsemble, rolling_forecast, summarize
from sundial.model import SundialModel

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "ConfigError", "ModelConfig", "TrainConfig", "model_config",
    "ForecastEnsemble", "rolling_forecast", "summarize", "SundialModel",
]
