"""Lightweight middle-level fusion network for RGB-D salient object detection."""

__version__ = "0.1.0"
