"""Deterministic edge-fog-cloud experiment toolkit.

Three experiment families run over one publish/subscribe bus: staged
serverless-style data pipelines, coordinator/worker data-parallel neural
network training, and synchronous/asynchronous federated learning.
"""

__version__ = "0.1.0"
