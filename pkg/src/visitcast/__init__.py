"""Joint next-visit time and code prediction for irregular event sequences."""

__version__ = "0.1.0"
