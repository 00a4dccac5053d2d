"""Desk-scale unsupervised classifier adaptation pipeline."""

__version__ = "0.1.0"
