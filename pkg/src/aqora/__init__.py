"""Learned adaptive join optimization on a staged execution simulator."""

__version__ = "0.1.0"
