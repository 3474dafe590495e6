"""Finite-sample checks for quasi maximum likelihood estimation."""

__version__ = "0.1.0"
