"""Adapter tuning for multilingual speech translation, at toy scale, on a numpy autodiff core."""

__version__ = "0.1.0"
