"""Factor-graph active SLAM for spacecraft proximity operations."""

__version__ = "0.1.0"
