"""Desk-scale talking-face pipeline: AU-guided disentanglement, audio/face fusion and a
conditional radiance field, with a procedural face dataset and a small autodiff engine."""

__version__ = "0.1.0"
