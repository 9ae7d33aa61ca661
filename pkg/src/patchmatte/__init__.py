"""Patch-based high-resolution image matting with cross-patch context."""

__version__ = "0.1.0"
