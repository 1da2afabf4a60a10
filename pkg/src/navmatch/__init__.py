"""Subgraph matching with a learned candidate navigator."""

__version__ = "0.1.0"
