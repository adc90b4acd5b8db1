"""Review-grounded answer generation for product questions."""

__version__ = "0.1.0"
