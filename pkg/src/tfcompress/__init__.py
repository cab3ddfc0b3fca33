"""Compression toolkit for talking-face generators: compact students, distillation and mixed-precision PTQ."""

__version__ = "0.1.0"
