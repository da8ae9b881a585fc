"""Unsupervised log anomaly detection: transformer scoring plus augmentation-calibrated boundaries."""

__version__ = "0.1.0"
