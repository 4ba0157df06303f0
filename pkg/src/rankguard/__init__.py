"""Rank selection for low-rank plus sparse plus noise matrices."""

__version__ = "0.1.0"
