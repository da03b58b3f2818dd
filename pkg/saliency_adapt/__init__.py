"""Synthetic salient-object data and uncertainty-aware pseudo-label domain adaptation."""

import logging

from .core.config_manager import ConfigManager, RoundSchedule, RunConfig, TrainConfig
from .core.errors import SaliencyAdaptError
from .core.imaging import BinaryMask, GrayMap, RgbaImage, RgbImage, Spectrum
from .pipeline.predictor import PredictorParams, SaliencyPredictor

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "ConfigManager",
    "GrayMap",
    "PredictorParams",
    "RgbImage",
    "RgbaImage",
    "RoundSchedule",
    "RunConfig",
    "SaliencyAdaptError",
    "SaliencyPredictor",
    "Spectrum",
    "TrainConfig",
]
