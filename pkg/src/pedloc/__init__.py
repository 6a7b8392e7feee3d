"""Pedestrian distance estimation from 2D keypoints with calibrated confidence intervals."""

__version__ = "0.1.0"
