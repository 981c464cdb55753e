"""minibox: a deterministic, desk-scale container engine."""

__version__ = "0.1.0"
