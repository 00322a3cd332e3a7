"""Unsupervised sequential motion tracking with Gaussian-process latent coding."""

__version__ = "0.1.0"
