"""Diagnostics for training-data-attribution score matrices of music generation models."""

__version__ = "0.1.0"
