"""Distributionally robust contrastive-centroid loss for long-tail data."""

__version__ = "0.1.0"
