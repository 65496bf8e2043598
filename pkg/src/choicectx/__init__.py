"""Discrete choice models with linear feature context effects."""

__version__ = "0.1.0"
