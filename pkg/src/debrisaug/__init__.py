"""Semantic augmentation of driving images with synthetic road debris, and detector evaluation."""

__version__ = "0.1.0"
