"""Recurrent and feed-forward temporal aggregation for video person re-identification."""

__version__ = "0.1.0"
