"""Coherent entity-aware multi-image captioning toolkit."""

__version__ = "0.1.0"
