"""Conditional score-based residual diffusion for volumetric denoising."""

__version__ = "0.1.0"
