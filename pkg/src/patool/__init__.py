"""Imperceptible targeted audio attacks with a time-domain psychoacoustic loss."""

__version__ = "0.1.0"
