"""Personality recognition from person-specific cognitive network graphs."""

__version__ = "0.1.0"
