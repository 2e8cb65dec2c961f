"""Behavior-based recommendation with category-based clustering."""

__version__ = "0.1.0"

from .data_model import (  # noqa: E402
    BehaviorRecord,
    BehaviorType,
    Dataset,
    StatsSummary,
    filter_phase1,
    filter_phase2,
    load_dataset,
    preprocess,
    read_dataset,
)
from .correlation import CorrelationMatrix, cooperation, correlation, correlation_matrix  # noqa: E402
from .clustering import Clustering, cbc_assign, fcm, form_clusters, kmeans  # noqa: E402
from .recommender import BehaviorProfile, BehaviorRecommender, recommend_top_k  # noqa: E402
from .evaluation import ExperimentConfig, run_experiment  # noqa: E402
