"""Activation maximization for spoken-command classifiers."""

__version__ = "0.1.0"
