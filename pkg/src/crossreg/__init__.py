"""Differentiable image to point-cloud registration on synthetic scenes."""

__version__ = "0.1.0"
