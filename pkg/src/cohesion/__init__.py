"""COHESION multimodal graph recommender."""

from .data import (
    DatasetSplit,
    FeatureMatrix,
    InteractionTable,
    generate_synthetic,
    kcore_filter,
    load_features,
    load_interactions,
    save_features,
    split_dataset,
)
from .evaluation import MetricsReport, evaluate, ndcg_at_k, rank_items, recall_at_k
from .graph import KnnGraph, SparseAdjacency, build_adjacency, normalize_sym, spmm, topk_knn
from .model import CohesionModel, ForwardTrace, ModelConfig
from .training import TrainConfig, adam_step, adaptive_bpr_loss, adaptive_weights, fit, sample_triplets

__all__ = [
    "CohesionModel", "DatasetSplit", "FeatureMatrix", "ForwardTrace", "InteractionTable",
    "KnnGraph", "MetricsReport", "ModelConfig", "SparseAdjacency", "TrainConfig",
    "adam_step", "adaptive_bpr_loss", "adaptive_weights", "build_adjacency", "evaluate",
    "fit", "generate_synthetic", "kcore_filter", "load_features", "load_interactions",
    "ndcg_at_k", "normalize_sym", "rank_items", "recall_at_k", "sample_triplets",
    "save_features", "split_dataset", "spmm", "topk_knn",
]

__version__ = "0.1.0"
