"""Numerical lab for stochastic homogenization of elliptic, harmonic-map and LLG problems."""

__version__ = "0.1.0"
