"""Cycle context verification for in-context segmentation."""

__version__ = "0.1.0"
