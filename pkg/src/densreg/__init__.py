"""Density-Regression: single-pass deep regression with density-modulated predictive variance."""

__version__ = "0.1.0"
