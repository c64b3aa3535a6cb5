"""Unsupervised entity alignment with joint dangling-entity detection."""

__version__ = "0.1.0"
