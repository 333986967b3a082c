"""Federated data repository: node state machine plus a deterministic network simulator."""

__version__ = "0.1.0"
