"""Self-distillation pretraining for parcellated fMRI time series with network tokens."""

from .config import RunConfig, load_config, toy_config
from .dataset import AtlasMapping, ScanTimeSeries, default_atlas
from .model import BrainSemantoks, build_model

__version__ = "0.1.0"

__all__ = [
    "AtlasMapping",
    "BrainSemantoks",
    "RunConfig",
    "ScanTimeSeries",
    "build_model",
    "default_atlas",
    "load_config",
    "toy_config",
]
