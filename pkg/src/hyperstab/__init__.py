"""Stability analysis tools for linear first-order hyperbolic systems on [0, 1]."""
__version__ = "0.1.0"
