"""Transformer risk model over longitudinal EHR code sequences with dual positional encodings."""

__version__ = "0.1.0"
