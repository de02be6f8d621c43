"""Triplet embedding training with subspace hard-negative mining, label
cleaning and two-layer identity retrieval."""

__version__ = "0.1.0"
