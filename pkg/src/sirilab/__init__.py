"""Selective retraining for a toy visual grounding model."""

__version__ = "0.1.0"
