"""Desk-scale retrieval-augmented vision-language model with level-routed
low-rank semantic experts."""

__version__ = "0.1.0"
