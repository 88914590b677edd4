"""Discrepancy-aware teacher-student anomaly detection (desk scale)."""

__version__ = "0.1.0"
