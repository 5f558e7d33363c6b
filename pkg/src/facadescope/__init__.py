"""Street-level building image dataset pipeline."""

__version__ = "0.1.0"
