"""Zero-style domain adaptation for semantic segmentation, desk scale."""

__version__ = "0.1.0"
