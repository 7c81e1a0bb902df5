"""Hierarchical generative cellular automata for LiDAR scene completion."""

__version__ = "0.1.0"
