"""Desk-scale protein-biotext pre-training toolkit."""

__version__ = "0.1.0"
