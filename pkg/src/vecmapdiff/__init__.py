"""Diffusion-based vectorized map construction on synthetic scenes."""

__version__ = "0.1.0"
