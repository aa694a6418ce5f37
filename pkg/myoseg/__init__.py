"""Texture-based skeletal muscle segmentation with atlas labeling."""

__version__ = "0.1.0"
