"""Graph contrastive collaborative filtering with a low-rank SVD propagation view."""

from .data import InteractionSet, SparseBipartite, group_by_degree, load_interactions, normalize, split
from .evaluation import MetricsReport, evaluate, mad
from .model import EmbeddingState, forward, init_embeddings, score, score_all
from .objective import LossBreakdown, LossWeights, loss_and_grad
from .svd import LowRankFactors, RsvdConfig, approx_svd
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "InteractionSet", "SparseBipartite", "group_by_degree", "load_interactions", "normalize", "split",
    "MetricsReport", "evaluate", "mad",
    "EmbeddingState", "forward", "init_embeddings", "score", "score_all",
    "LossBreakdown", "LossWeights", "loss_and_grad",
    "LowRankFactors", "RsvdConfig", "approx_svd",
    "TrainConfig", "train",
]
