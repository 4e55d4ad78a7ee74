"""Defensive letter toolkit: letter classification, I-FGSM defensibility, defensive letters."""

__version__ = "1.0.0"
