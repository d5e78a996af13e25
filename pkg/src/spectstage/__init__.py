"""Staging classifiers for 3D slice stacks: 2D backbones with slice aggregation,
3D backbones, cotraining, and a cross-validated evaluation harness."""

__version__ = "0.1.0"
