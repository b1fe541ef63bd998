"""CaberNet: causal representation learning for cross-domain energy prediction."""

__version__ = "0.1.0"
