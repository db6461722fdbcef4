"""Gait recognition from silhouette sequences via motion-excited features."""

__version__ = "0.1.0"
