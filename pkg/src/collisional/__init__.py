"""Repeated-interaction (collisional) models of open quantum dynamics."""

__version__ = "0.1.0"
