"""Flow-matching trajectory planning with stitching and guided sampling."""

__version__ = "0.1.0"
