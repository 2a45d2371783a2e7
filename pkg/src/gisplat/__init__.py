"""Gaussian-splatting SLAM with inertial motion cues."""

__version__ = "0.1.0"
