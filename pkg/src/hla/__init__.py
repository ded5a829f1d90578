"""Hyperspherical loss-aware ternary quantisation for fully-connected networks."""

__version__ = "0.1.0"
