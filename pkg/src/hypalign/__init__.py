"""Hierarchical adversarially robust image-text alignment in the Poincare ball."""

from hypalign.dataio import RunConfig, load_config
from hypalign.hierarchy import HierarchyForest, HierarchyTree, load_forest, parse_forest
from hypalign.model import EmbeddingModel, load_checkpoint, save_checkpoint
from hypalign.trainer import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "EmbeddingModel",
    "HierarchyForest",
    "HierarchyTree",
    "RunConfig",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "load_forest",
    "parse_forest",
    "save_checkpoint",
    "train",
]
