"""Event-level simulator and analysis toolkit for energy-time Bell tests."""

__version__ = "0.1.0"
