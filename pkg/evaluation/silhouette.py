from typing import Sequence

import numpy as np
from sklearn import metrics

from core.exceptions import ContractError, DimensionError


def silhouette_samples(embeddings: np.ndarray, labels: Sequence) -> np.ndarray:
    """Per-point silhouette under Euclidean distance; members of singleton clusters score 0."""
    points = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if points.ndim != 2:
        raise DimensionError(f"expected an (M, d) embedding matrix, got shape {points.shape}")
    if labels.shape != (points.shape[0],):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {points.shape[0]} points")
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise ContractError(f"silhouette needs at least two clusters, got {clusters.size}")
    # sklearn refuses one point per cluster; every point is a singleton there
    if clusters.size == points.shape[0]:
        return np.zeros(points.shape[0])
    # a = b = 0 comes back from sklearn as 0
    return metrics.silhouette_samples(points, labels, metric="euclidean")


def silhouette(embeddings: np.ndarray, labels: Sequence) -> float:
    return float(np.mean(silhouette_samples(embeddings, labels)))
