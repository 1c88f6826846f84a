"""Chunked, host-offloaded attention for long-sequence training: numerics, memory model and schedule simulator."""

__version__ = "0.1.0"
