"""
Video matting with temporal feature alignment and fusion
Synthetic compositing, trimap propagation, the matting network, its losses
and the image and temporal evaluation metrics
"""

from .config import ExperimentConfig, load_config
from .errors import ConfigError, DivergenceError, FormatError, InvalidInputError, VMatteError
from .types import AlphaClip, Clip, CompositeSample, MotionField, Trimap

__version__ = "0.1.0"

__all__ = [
    "AlphaClip",
    "Clip",
    "CompositeSample",
    "ConfigError",
    "DivergenceError",
    "ExperimentConfig",
    "FormatError",
    "InvalidInputError",
    "MotionField",
    "Trimap",
    "VMatteError",
    "load_config",
]
