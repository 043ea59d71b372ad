"""Uncertainty-aware planar pose regression with MC dropout and percentile rejection."""

__version__ = "0.1.0"
