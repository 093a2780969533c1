"""Thinned completely random measures and the models built on them."""

__version__ = "0.1.0"
