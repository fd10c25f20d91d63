"""Trigger-distribution modeling for backdoor defense, at desk scale.

Modules: ``numeric`` (random streams, optimizers, gradient checks, PCA),
``networks`` (hand-written generator, statistics and classifier networks),
``mine`` (mutual-information lower bound), ``mesa`` (max-entropy staircase
ensembles), ``testbed`` (data, triggers, attacks), ``defense`` (detection and
retraining), ``oracle`` (synthetic problems with known densities) and ``cli``.
"""
from .numeric import ContractError, RngStream

__all__ = ["ContractError", "RngStream"]
__version__ = "0.1.0"
