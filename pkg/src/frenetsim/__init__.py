"""Controllable traffic scenario generation with guided diffusion."""

__version__ = "0.1.0"
