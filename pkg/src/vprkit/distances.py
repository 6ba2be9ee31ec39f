"""Shared distance/assignment kernels.

Hard VLAD, k-means, and the cluster-assignment visualization all resolve
nearest centers through the same code path so their labels always agree.
Inputs are promoted to float64.
"""

from __future__ import annotations

import numpy as np


def squared_distances(feats: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (n_feats, n_centers)."""
    f = np.asarray(feats, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    d2 = (
        np.sum(f * f, axis=1)[:, None]
        + np.sum(c * c, axis=1)[None, :]
        - 2.0 * (f @ c.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def nearest_center_labels(feats: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center per feature; ties go to the lowest index."""
    return np.argmin(squared_distances(feats, centers), axis=1)


def soft_assignment_weights(
    feats: np.ndarray, centers: np.ndarray, temperature: float
) -> np.ndarray:
    """Softmax over centers of -||f - c||^2 / temperature, rows sum to 1."""
    logits = -squared_distances(feats, centers) / float(temperature)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    """Unit L2 norm; all-zero vectors stay zero."""
    norm = np.linalg.norm(vec)
    if norm == 0:
        return vec
    return vec / norm
