"""Oracles and Monte Carlo verification for finite-type branching processes."""

__version__ = "0.1.0"
