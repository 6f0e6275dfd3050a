"""Fusion-in-decoder reader with passage re-ranking, sentence evidence classification and anchor guidance."""

__version__ = "0.1.0"
