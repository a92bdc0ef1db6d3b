"""Trace-structure fingerprinting and SLO-driven resource allocation."""

__version__ = "0.1.0"
