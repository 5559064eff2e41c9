"""Satellite image time-series forecasting with semantic control injection,
temporal-token embedding and temporal consistency metrics."""

__version__ = "0.1.0"
