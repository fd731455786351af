"""Hypergraph multimodal stock-movement model with style-structured experts."""

__version__ = "0.1.0"
