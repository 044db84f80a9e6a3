"""HGCH: hyperbolic graph convolution for heterogeneous collaborative graphs."""

from .estimator import HGCHRecommender
from .graph import Hcg, Relation, SplitDataset, ingest, k_core, split
from .model import ModelConfig, ModelParams
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "HGCHRecommender",
    "Hcg",
    "ModelConfig",
    "ModelParams",
    "Relation",
    "SplitDataset",
    "TrainConfig",
    "ingest",
    "k_core",
    "split",
    "train",
]
