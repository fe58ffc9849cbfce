"""Desk-scale laboratory for Bayesian mixture-of-experts routing."""

__version__ = "0.1.0"
