"""Continual scene-coordinate localization with spatial-aware replay and
structure-preserving distillation."""

__version__ = "0.1.0"
