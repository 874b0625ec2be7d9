"""Localized adversarial training toolkit: a small CNN, masked PGD and evaluation reports."""

__version__ = "0.1.0"
