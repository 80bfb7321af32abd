"""Noise-contrastive-prior VAEs for input uncertainty and OOD detection."""

__version__ = "0.1.0"
