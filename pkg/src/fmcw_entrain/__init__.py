"""Passive identification and tracking of an unknown FMCW radar waveform."""

__version__ = "0.1.0"
