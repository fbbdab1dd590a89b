"""Measure how small sparse-attention language models use long context."""

__version__ = "0.1.0"
