"""Ensemble-noise denoising-autoencoder defenses against gradient-based attacks."""

__version__ = "0.1.0"
