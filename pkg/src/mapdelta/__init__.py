"""Change detection and maintenance for visual positioning maps."""

__version__ = "0.1.0"
