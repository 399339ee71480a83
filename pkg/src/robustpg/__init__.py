"""Robust policy optimization under epsilon-contaminated episode data."""

__version__ = "0.1.0"
