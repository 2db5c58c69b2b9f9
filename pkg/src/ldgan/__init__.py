"""Latent-space GAN augmentation pipeline for spectral imaging."""

__version__ = "0.1.0"
