"""Dissipative qubit under continuous measurement and feedback."""

__version__ = "1.0.0"
