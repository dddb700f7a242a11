"""Hierarchical ViT kernels, complexity analysis, constrained architecture search and benchmarking."""

__version__ = "0.1.0"
