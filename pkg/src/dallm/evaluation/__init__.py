from .harness import (
    ClassifierKind,
    ClassifierSpec,
    MetricsReport,
    MseTable,
    compare_feature_sets,
    compute_metrics,
    mse_table,
    relevant_feature_count,
    stratified_split,
    train_classifier,
)
from .metrics import MetricsRow, binary_metrics, roc_auc

__all__ = [
    "ClassifierKind",
    "ClassifierSpec",
    "MetricsReport",
    "MetricsRow",
    "MseTable",
    "binary_metrics",
    "compare_feature_sets",
    "compute_metrics",
    "mse_table",
    "relevant_feature_count",
    "roc_auc",
    "stratified_split",
    "train_classifier",
]
