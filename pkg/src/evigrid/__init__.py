"""Evidential top-view grid mapping and temporal fusion of range-sensor scans."""

__version__ = "0.1.0"
