"""Generalizable human radiance fields from monocular video, at desk scale."""

__version__ = "0.1.0"
