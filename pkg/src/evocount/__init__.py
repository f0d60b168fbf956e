"""Evolving object counting: incremental density-map regression on synthetic scenes."""

__version__ = "0.1.0"
