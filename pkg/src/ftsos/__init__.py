"""Finite-time stability certificates via sum-of-squares programming."""

__version__ = "0.1.0"
