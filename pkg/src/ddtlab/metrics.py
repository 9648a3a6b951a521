"""Sample-quality metrics for synthetic experiments."""

from __future__ import annotations

import numpy as np

from .spectral import radial_spectrum

__all__ = ["mmd_rbf", "spectral_distance"]


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)
    bb = np.sum(b * b, axis=1)
    d = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def mmd_rbf(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """RBF-kernel maximum mean discrepancy (biased V-statistic, >= 0).

    The kernel scale defaults to the median heuristic: gamma = 1 / median
    of the pooled pairwise squared distances, which keeps the statistic
    deterministic and comparable across calls on the same data.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("mmd needs at least two samples per side")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    d_xx = _pairwise_sq_dists(x, x)
    d_yy = _pairwise_sq_dists(y, y)
    d_xy = _pairwise_sq_dists(x, y)
    if bandwidth is None:
        pooled = np.concatenate([
            d_xx[np.triu_indices(len(x), k=1)],
            d_yy[np.triu_indices(len(y), k=1)],
            d_xy.ravel(),
        ])
        med = float(np.median(pooled))
        bandwidth = med if med > 0 else 1.0
    gamma = 1.0 / bandwidth
    stat = (np.mean(np.exp(-gamma * d_xx)) + np.mean(np.exp(-gamma * d_yy))
            - 2.0 * np.mean(np.exp(-gamma * d_xy)))
    return float(np.sqrt(max(stat, 0.0)))


def spectral_distance(x: np.ndarray, y: np.ndarray) -> float:
    """L2 distance between the radial spectra of two image batches."""
    sx = radial_spectrum(x)
    sy = radial_spectrum(y)
    if len(sx) != len(sy):
        raise ValueError("batches must share the image size")
    return float(np.linalg.norm(sx - sy))
