"""Desk-scale class-incremental semantic segmentation with decomposed distillation."""

__version__ = "0.1.0"
