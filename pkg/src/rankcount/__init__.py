"""Unsupervised crowd counting from synthetic ranking pairs and noisy counts."""

__version__ = "0.1.0"
