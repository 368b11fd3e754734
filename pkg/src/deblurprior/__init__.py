"""Blind deblurring with a learned blur-classifier image prior."""

__version__ = "0.1.0"
