"""Uncertainty-driven exploration for image-goal navigation in a 2D raycast world."""

__version__ = "0.1.0"
