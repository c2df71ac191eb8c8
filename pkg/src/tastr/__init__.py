"""Unsupervised tracklet-association re-identification on simulated camera networks."""

__version__ = "0.1.0"
