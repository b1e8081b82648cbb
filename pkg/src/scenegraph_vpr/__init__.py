"""Place recognition from textual scene graphs.

Descriptions become validated scene graphs, frame graphs merge into place
graphs, a graph attention encoder trained with InfoNCE embeds them, and
retrieval fuses cosine similarity with a shortest-path graph kernel.
"""

from .describe import Lexicon, ServiceClient, parse_description
from .evaluation import EvalConfig, FrameManifestEntry, RecallReport, haversine_m, recall_at_k
from .fixtures import NoiseModel, generate_synthetic_fixture
from .features import EmbeddingStore, FeatureBundle, HashedEmbedder, build_features
from .gat import GatConfig, GatParameters, GraphEmbedding, encode, forward, init_params
from .graph import SceneEdge, SceneGraph, SceneNode, canonical_serialize, graph_stats, parse_scene_graph
from .kernel import SpProfile, sp_gram, sp_profile, sp_similarity
from .merge import MergeConfig, MergeResult, merge_graphs, tfidf_cosine
from .retrieval import (
    ConstantAlpha,
    Encoder,
    LogisticAlpha,
    PlaceRecord,
    QueryHit,
    ThresholdRules,
    build_index,
    fit_alpha_regressor,
    fuse,
    query,
)
from .train import TrainConfig, TrainingPair, info_nce_loss, train

__version__ = "0.1.0"

__all__ = [
    "ConstantAlpha", "EmbeddingStore", "Encoder", "EvalConfig", "FeatureBundle", "FrameManifestEntry",
    "GatConfig", "GatParameters", "GraphEmbedding", "HashedEmbedder", "Lexicon", "LogisticAlpha",
    "MergeConfig", "MergeResult", "NoiseModel", "PlaceRecord", "QueryHit", "RecallReport", "SceneEdge", "SceneGraph",
    "SceneNode", "ServiceClient", "SpProfile", "ThresholdRules", "TrainConfig", "TrainingPair",
    "build_features", "build_index", "canonical_serialize", "encode", "fit_alpha_regressor", "forward",
    "fuse", "generate_synthetic_fixture", "graph_stats", "haversine_m", "info_nce_loss", "init_params", "merge_graphs",
    "parse_description", "parse_scene_graph", "query", "recall_at_k", "sp_gram", "sp_profile",
    "sp_similarity", "tfidf_cosine", "train",
]
