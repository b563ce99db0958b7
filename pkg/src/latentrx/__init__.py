"""Latent world-model reinforcement learning for treatment policies from sparse, irregular ICU records."""

__version__ = "0.1.0"
