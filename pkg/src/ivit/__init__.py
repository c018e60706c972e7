"""Instance-based vision transformer for subtyping ROIs from nucleus instances."""

__version__ = "0.1.0"
