"""Automated CT volumetry and NPH screening."""

__version__ = "0.1.0"
