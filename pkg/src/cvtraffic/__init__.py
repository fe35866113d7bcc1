"""Signalized-arterial performance measures from connected-vehicle trajectories, with anomaly-aware forecasting."""

__version__ = "0.1.0"
