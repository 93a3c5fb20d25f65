"""Differentiable search over layer-wise connections in graph neural networks."""

__version__ = "0.1.0"
