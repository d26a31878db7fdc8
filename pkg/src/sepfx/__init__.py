"""Conditional separable effects for outcomes truncated by a terminal event."""

__version__ = "0.1.0"
