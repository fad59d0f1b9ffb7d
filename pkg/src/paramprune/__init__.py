"""Regression-based reduction of dynamic parameters in rigid multibody models."""

__version__ = "0.1.0"
