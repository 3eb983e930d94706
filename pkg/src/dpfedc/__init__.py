"""Differentially private federated clustering via penalized matrix factorization."""

__version__ = "0.1.0"
