"""Pose-free Gaussian splatting from dense point maps with per-view SH illumination."""

__version__ = "0.1.0"
