"""Wavelet-based style augmentation for cross-domain few-shot learning."""

__version__ = "0.1.0"
