"""Coupled power-transport day-ahead scheduling with distributionally robust optimization."""

__version__ = "0.1.0"
