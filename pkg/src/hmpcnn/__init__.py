"""Hierarchical max-pooling posterior models and the CNN classifiers that learn them."""

__version__ = "0.1.0"
