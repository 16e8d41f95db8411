"""Scalar losses returning ``(value, gradients)``."""

from __future__ import annotations

import numpy as np


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element."""
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def gaussian_kl(mean: np.ndarray, logvar: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over latent dims, averaged over batch.

    ``mean`` and ``logvar`` have shape (batch, z_dim).
    """
    b = mean.shape[0]
    ev = np.exp(logvar)
    kl = -0.5 * np.sum(1.0 + logvar - mean * mean - ev) / b
    return float(kl), mean / b, 0.5 * (ev - 1.0) / b
