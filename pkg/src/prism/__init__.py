"""Desk-scale simulator for silent data corruption in mixed-precision training."""

__version__ = "0.1.0"
