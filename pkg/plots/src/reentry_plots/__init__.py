"""Display-only rendering of reentry-infer output files."""

__version__ = "0.1.0"
