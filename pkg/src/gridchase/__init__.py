"""Robust online voltage control with model chasing on radial feeders."""

__version__ = "0.1.0"
