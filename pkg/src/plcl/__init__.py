"""Phoneme-level contrastive learning for user-defined keyword spotting."""

__version__ = "0.1.0"
