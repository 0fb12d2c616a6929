"""Meter-to-transformer topology reconstruction."""
__version__ = "0.1.0"
