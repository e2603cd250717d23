"""Numerical toolkit for Gaussian beam quasimodes and related constructions on transversal manifolds."""

__version__ = "0.1.0"
