"""Robust output control barrier functions learned from expert demonstrations."""

__version__ = "0.1.0"
