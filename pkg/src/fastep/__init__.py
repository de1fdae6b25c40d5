"""Expectation propagation for sparse linear models with a provably convergent double loop."""

__version__ = "0.1.0"
