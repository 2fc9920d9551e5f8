"""Numerical laboratory for high moments of the parabolic Anderson model
with a log-correlated Gaussian potential."""

__version__ = "0.1.0"
