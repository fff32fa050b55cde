"""Few-shot image generation with sample-specific deltas."""

__version__ = "0.1.0"
