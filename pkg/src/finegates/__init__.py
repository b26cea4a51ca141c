"""Stochastic-gate structured sparsification of frozen weights, with optional low-rank adapters."""

__version__ = "0.1.0"
