"""Federated learning simulator with cardinality-constrained weight pruning,
encrypted sparse model updates, and an emulated trusted-enclave aggregator."""

__version__ = "0.1.0"
