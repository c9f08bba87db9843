"""Calibrate frozen VLM concept scores against human pairwise preferences."""

from prefcal.labels import CATEGORIES, Label

__version__ = "0.1.0"

__all__ = ["CATEGORIES", "Label", "__version__"]
