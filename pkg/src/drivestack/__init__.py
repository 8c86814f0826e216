"""Desk-scale end-to-end vehicle control: networks, data pipeline, simulator."""

__version__ = "0.1.0"
