"""Timing-offset estimation for asynchronous microphone arrays via combined low-rank approximation."""

__version__ = "0.1.0"
