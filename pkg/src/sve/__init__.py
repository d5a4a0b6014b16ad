"""Singular value ensembles: implicit ensembles over a frozen SVD basis."""

__version__ = "0.1.0"
