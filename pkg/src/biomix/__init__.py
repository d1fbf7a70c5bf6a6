"""Biosignal- and audio-driven gain automation for live performance."""

__version__ = "0.1.0"
