"""Closed-loop sleep staging and sleep-onset audio control for a wearable headband."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1
