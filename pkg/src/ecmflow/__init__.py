"""Correlation-matching optical flow estimation and video frame interpolation.

Everything runs on a small numpy-backed tensor core with reverse-mode
differentiation, so every operator in the pipeline can be verified against
finite differences and brute-force oracles.
"""

from ecmflow.tensor import Tensor, Tape, NonFiniteError, ShapeError
from ecmflow.config import RunConfig, ConfigError, parse_config

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "RunConfig",
    "ConfigError",
    "parse_config",
]

__version__ = "0.1.0"
