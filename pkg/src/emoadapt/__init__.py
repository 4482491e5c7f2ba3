"""Residual-adapter ResNets for multi-corpus speech emotion recognition."""

__version__ = "0.1.0"
