"""Triplet mining with a proximity-graph index and an adaptive exclusion boundary."""

from .controller import ControllerConfig, KappaController
from .data import Dataset, generate_synthetic, load_dataset, save_dataset
from .embedding import EmbeddingParams, LayerSpec, forward, forward_batch, init_params
from .errors import (ConfigError, DegenerateFitError, DegenerateNormError, IndexBuildError,
                     NoPositiveError, NumericError, ParseError, SmartMineError)
from .losses import LossConfig, combined_loss
from .trainer import TrainConfig, TrainData, benchmark_mining, train
from .workbench import SweepSpec, run_sweep

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ControllerConfig", "Dataset", "DegenerateFitError", "DegenerateNormError",
    "EmbeddingParams", "IndexBuildError", "KappaController", "LayerSpec", "LossConfig",
    "NoPositiveError", "NumericError", "ParseError", "SmartMineError", "SweepSpec",
    "TrainConfig", "TrainData", "benchmark_mining", "combined_loss", "forward", "forward_batch",
    "generate_synthetic", "init_params", "load_dataset", "run_sweep", "save_dataset", "train",
]
