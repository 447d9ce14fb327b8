"""Desk-scale driving-plan evaluation and appearance-robustness harness."""

__version__ = "0.1.0"
