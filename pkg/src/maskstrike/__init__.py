"""Masked, type-specific adversarial attacks on a small two-stage detector."""

__version__ = "0.1.0"
