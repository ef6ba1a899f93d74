"""Rare-event risk estimation for automated-driving scenarios."""

__version__ = "0.1.0"
