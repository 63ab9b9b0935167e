"""Numerical KAM toolkit for quasi-linear autonomous Schroedinger equations."""

__version__ = "0.1.0"
