"""Pitch/timbre disentanglement of instrument notes with a Gaussian-mixture VAE."""

__version__ = "0.1.0"
