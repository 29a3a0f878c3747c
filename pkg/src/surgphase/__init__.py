"""Desk-scale video transformer for online surgical phase recognition."""

__version__ = "0.1.0"
