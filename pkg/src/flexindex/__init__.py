"""Flexibility index maximization for DC power grids."""

__version__ = "0.1.0"
