"""Dense per-pixel gene-expression prediction from slide images."""

__version__ = "0.1.0"
