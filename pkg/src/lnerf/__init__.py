"""Hybrid grid radiance fields with LiDAR-seeded density and decomposed color heads."""

__version__ = "0.1.0"
