"""Crop-field delineation with partial labels, watershed instances and synthetic landscapes."""

__version__ = "0.1.0"
