"""Collaborative deep-belief-network intrusion detection for blockchain node traffic."""

__version__ = "0.1.0"
