"""Recurrent visual navigation controller, simulator, and imitation pipeline."""

__version__ = "0.1.0"
