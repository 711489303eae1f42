"""Desk-scale interaction-mode discovery for articulated objects."""

__version__ = "0.1.0"
