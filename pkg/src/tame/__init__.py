"""Trainable multi-layer attention explanations for frozen CNN classifiers."""

__version__ = "0.1.0"
