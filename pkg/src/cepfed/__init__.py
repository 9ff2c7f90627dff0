"""Personalized federated learning with risk-weighted gradient correction and
hierarchical SVD compression of client uploads."""

__version__ = "0.1.0"
