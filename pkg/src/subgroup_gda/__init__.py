"""Constrained subgroup identification by gradient descent-ascent."""

__version__ = "0.1.0"
