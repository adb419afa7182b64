"""Detector-free coarse-to-fine image matching on a small numpy autodiff engine."""

from .config import ConfigError, RunConfig
from .model import FMRT

__version__ = "0.1.0"

__all__ = ["ConfigError", "FMRT", "RunConfig", "__version__"]
