"""Numerical laboratory for exponential-power measures on subelliptic spaces."""

__version__ = "0.1.0"
