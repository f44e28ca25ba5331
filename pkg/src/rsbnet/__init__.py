"""RSB-Net: counterfactual regression with a decorrelated bias/outcome representation split."""

from .dataio import DatasetBundle, SplitSpec, fit_normalizer, load, split
from .evaluation import aggregate, ate_error, pehe, pehe_nn, welch_t_test
from .losses import IPMConfig, LossWeights
from .model import NetworkConfig, RSBNet
from .synthetic import Realization, SyntheticConfig, generate
from .trainer import FactualData, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DatasetBundle",
    "FactualData",
    "IPMConfig",
    "LossWeights",
    "NetworkConfig",
    "RSBNet",
    "Realization",
    "SplitSpec",
    "SyntheticConfig",
    "TrainConfig",
    "aggregate",
    "ate_error",
    "fit_normalizer",
    "generate",
    "load",
    "pehe",
    "pehe_nn",
    "split",
    "train",
    "welch_t_test",
]
