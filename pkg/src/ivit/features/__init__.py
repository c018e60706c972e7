from .cellular import (
    FEATURE_NAMES,
    aggregate_distribution,
    cellular_features,
    feature_columns,
    feature_labels,
    gbdt_gh_vector,
    grade_distribution,
    write_feature_csv,
)
from .delaunay import delaunay_neighbor_distances, delaunay_neighbours
from .tree import DecisionTree, decision_tree_fit, decision_tree_predict

__all__ = [
    "FEATURE_NAMES",
    "DecisionTree",
    "aggregate_distribution",
    "cellular_features",
    "decision_tree_fit",
    "decision_tree_predict",
    "delaunay_neighbor_distances",
    "delaunay_neighbours",
    "feature_columns",
    "feature_labels",
    "gbdt_gh_vector",
    "grade_distribution",
    "write_feature_csv",
]
