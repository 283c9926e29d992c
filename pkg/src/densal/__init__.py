"""Batch active learning for per-pixel density regression on tiled rasters."""

__version__ = "0.1.0"
