"""Coarse-to-fine tissue mask translation and histopathology image synthesis."""

__version__ = "0.1.0"
