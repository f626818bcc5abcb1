"""Symmetry-transformation information bottleneck on dense numpy arrays."""

__version__ = "0.1.0"

from .config import ConfigError, TrainConfig
from .data import Dataset, SpiralConfig, gen_spiral, load_csv, save_csv
from .miest import KsgConfig, ksg_mi
from .model import Metrics, evaluate, fit, predict, traverse_z0
from .params import load_params, save_params

__all__ = [
    "ConfigError",
    "Dataset",
    "KsgConfig",
    "Metrics",
    "SpiralConfig",
    "TrainConfig",
    "evaluate",
    "fit",
    "gen_spiral",
    "ksg_mi",
    "load_csv",
    "load_params",
    "predict",
    "save_csv",
    "save_params",
    "traverse_z0",
]
