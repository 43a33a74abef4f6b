"""Diversified prototypical ensembles on frozen feature embeddings."""

__version__ = "0.1.0"
