"""Deterministic desk-scale federated learning simulator.

Implements layer-wise partial model training for heterogeneous clients,
width-reduction and FedAvg baselines, Dirichlet non-IID partitioning, and an
SVCCA representation-similarity analyzer.
"""

__version__ = "0.1.0"
