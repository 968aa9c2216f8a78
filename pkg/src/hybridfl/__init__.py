"""Accountable federated learning over a simulated hybrid ledger."""

__version__ = "0.1.0"
