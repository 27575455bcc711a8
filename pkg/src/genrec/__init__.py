"""Generative next-item recommendation over item titles."""

__version__ = "0.1.0"
