"""Numerical solvers for finite-horizon optimal multiple switching."""

__version__ = "0.1.0"
