"""Perception-planning distillation for a tiny driving VLA model."""

__version__ = "0.1.0"
