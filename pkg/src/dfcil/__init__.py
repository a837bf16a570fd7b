"""Data-free class-incremental learning with model-inversion replay."""

__version__ = "0.1.0"
