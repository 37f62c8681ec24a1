"""Weak-label click-train classification: DSP features, VAE embeddings, TCN classifier."""

__version__ = "0.1.0"
