"""Sampled batch normalization: sampling plans, exact backward, analysis and experiments."""

__version__ = "0.1.0"
