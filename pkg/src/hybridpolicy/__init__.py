"""Coarse-to-fine hybrid-action policies on a toy reach-and-align task."""

__version__ = "0.1.0"
