"""QPSK modem simulation with a conventional and a neural frame detector."""

__version__ = "0.1.0"
