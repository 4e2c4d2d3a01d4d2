"""Hierarchical geometric verification re-ranking and coarse-to-fine registration for LiDAR place recognition."""

__version__ = "0.1.0"
