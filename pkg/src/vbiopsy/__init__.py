"""Phantom-scale brain tumour localization and diagnosis pipeline."""

__version__ = "0.1.0"
