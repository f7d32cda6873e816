"""Chance-constrained trajectory optimization under Gaussian-mixture uncertainty."""

__version__ = "0.1.0"
