"""Dynamic surgical scene graphs: relation prediction, geometry, and graph-based recognition."""

__version__ = "0.1.0"
