"""Synthetic polyp image/mask pairs from single-image multi-scale GANs, plus evaluation tools."""

__version__ = "0.1.0"
