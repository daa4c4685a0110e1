"""Synthetic CT from two orthogonal kV projections."""

__version__ = "0.1.0"
