"""Mutation fuzzing for proprietary TCP-based PLC protocols."""

__version__ = "0.1.0"
