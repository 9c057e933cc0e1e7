"""Bayesian skew-t single-index mixed model with a monotone GP index function."""

__version__ = "0.1.0"
