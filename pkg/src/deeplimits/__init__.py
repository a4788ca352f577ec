"""Limits and power of gradient-based learning on parities, with a circuit-to-net compiler."""

__version__ = "0.1.0"
