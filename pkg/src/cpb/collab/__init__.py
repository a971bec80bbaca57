"""Similarity, clustering and within-cluster sharing."""

from .clustering import (
    ClusterAssignment,
    ClusteringSpec,
    cluster,
    cluster_agglomerative,
    cluster_kmeans,
    cluster_knn,
)
from .ip2ip import correlate_attackers, heavy_hitters
from .sharing import STRATEGIES, Strategy, intersection_events, pair_partners, share
from .similarity import SimilarityMatrix, o2o_plain

__all__ = [
    "ClusterAssignment",
    "ClusteringSpec",
    "SimilarityMatrix",
    "STRATEGIES",
    "Strategy",
    "cluster",
    "cluster_agglomerative",
    "cluster_kmeans",
    "cluster_knn",
    "correlate_attackers",
    "heavy_hitters",
    "intersection_events",
    "o2o_plain",
    "pair_partners",
    "share",
]
