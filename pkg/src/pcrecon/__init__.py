"""Latent-embedding-matched single-view 3D point-cloud reconstruction."""

__version__ = "0.1.0"
