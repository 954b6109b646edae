"""Modular embedding recomposition for continual zero-shot classification."""

__version__ = "0.1.0"
