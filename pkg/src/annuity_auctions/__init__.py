"""Annuity market simulation and structural estimation toolkit."""

__version__ = "0.1.0"
