"""Decentralized federated learning with per-node partial-consensus ledgers."""

__version__ = "0.1.0"
