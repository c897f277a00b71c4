"""Desk-scale consistency autoencoder whose latent space is trained toward linearity."""

__version__ = "0.1.0"
