"""Speculative parallel decoding with tapped decoding heads, an entropy gate and tree verification."""

__version__ = "0.1.0"
