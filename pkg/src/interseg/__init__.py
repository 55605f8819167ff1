"""Self-supervised instance segmentation learned by pick-and-place interaction."""

__version__ = "0.1.0"
