"""Self-supervised multi-view person association from bounding-box geometry."""

__version__ = "0.1.0"
