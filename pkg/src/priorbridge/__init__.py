"""Diffusion bridges with prior-energy drifts for point clouds and molecules."""

__version__ = "0.1.0"
