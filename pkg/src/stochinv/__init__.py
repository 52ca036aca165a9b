"""Stochastic inversion of material parameter distributions from specimen ensembles."""

__version__ = "0.1.0"
