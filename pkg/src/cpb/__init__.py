"""Collaborative predictive blacklisting toolkit."""

__version__ = "0.1.0"
