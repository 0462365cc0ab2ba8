"""Bayesian estimation of an elliptical non-conducting region from electrograms."""

__version__ = "0.1.0"
