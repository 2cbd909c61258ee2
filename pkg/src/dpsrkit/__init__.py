"""Diffusion-based pose prior with test-time optimization for pose inverse problems."""

__version__ = "0.1.0"
