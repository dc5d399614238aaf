"""Identification and tracking tools for periodic switching affine systems."""

__version__ = "0.1.0"
