"""Desk-scale camera-based semantic scene completion."""
__version__ = "0.1.0"
