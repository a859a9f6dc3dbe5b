"""Indirect local adversarial attacks on segmentation networks, and their detection."""

__version__ = "0.1.0"
