"""Moonshot BFT state machine replication: protocols, simulator and checkers."""

__version__ = "0.1.0"
