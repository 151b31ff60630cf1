"""Geo-prior token modulation toolkit for desk-scale SAR vision-language experiments."""

__version__ = "0.1.0"
