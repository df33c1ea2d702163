"""Dynamic source analysis of spatiotemporal fields."""

__version__ = "0.1.0"
