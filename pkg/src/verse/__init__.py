"""Desk-scale interactive 4D world model."""

__version__ = "0.1.0"
