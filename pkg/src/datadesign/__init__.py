"""Training-distribution design for out-of-distribution regression."""

__version__ = "0.1.0"
