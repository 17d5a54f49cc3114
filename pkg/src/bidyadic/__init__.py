"""Bi-parameter dyadic analysis on finite lattices."""

__version__ = "0.1.0"
