"""Windowed CSI compression at the edge with joint reconstruction and activity
recognition in the cloud."""

__version__ = "0.1.0"
