"""skelid: clothes-changing person re-identification from skeleton sequences."""

__version__ = "0.1.0"
