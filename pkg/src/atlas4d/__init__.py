"""Groupwise registration and spatiotemporal atlas construction."""

__version__ = "0.1.0"
