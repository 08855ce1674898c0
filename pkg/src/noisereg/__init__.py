"""Numerical laboratory for transport and SDEs with singular drift and noise."""

__version__ = "0.1.0"
