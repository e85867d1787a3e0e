"""Adversarial attacks on product images and their effect on visual recommenders."""

__version__ = "0.1.0"
