"""Uncertainty quantification for regression under distribution shift."""

__version__ = "0.1.0"
