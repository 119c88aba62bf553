"""Hierarchical variational generation of multiple sequence alignments."""

__version__ = "0.1.0"
