"""Distance and divergence primitives behind the KL uncertainty ball."""

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class Radius:
    """KL budget, class spread, and the induced bound on centroid displacement."""

    kl_radius: float
    sigma: float
    metric_radius: float


def _vector(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector has non-finite components")
    return a


def euclidean_distance(a, b):
    a = _vector(a)
    b = _vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.linalg.norm(a - b))


def kl_spherical_gaussian(mu_q, mu_p, sigma):
    """KL(q || p) for two spherical Gaussians sharing the standard deviation ``sigma``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = euclidean_distance(mu_q, mu_p)
    return d * d / (2.0 * sigma * sigma)


def radius_from_divergence(kl_radius, sigma):
    """Largest centroid displacement allowed inside a KL ball of size ``kl_radius``.

    Any spherical Gaussian q with ``KL(q || p) <= kl_radius`` has its mean
    within ``sigma * sqrt(2 * kl_radius)`` of the mean of p.
    """
    if kl_radius < 0 or sigma < 0:
        raise ValueError(f"kl_radius and sigma must be >= 0, got {kl_radius}, {sigma}")
    return Radius(float(kl_radius), float(sigma), sigma * math.sqrt(2.0 * kl_radius))
