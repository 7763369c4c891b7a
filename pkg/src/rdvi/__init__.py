"""Radial-directional variational inference for small Bayesian neural networks.

The package factorizes each weight matrix into directional (von Mises-Fisher)
and radial (log-normal, half-Cauchy-derived) posteriors, trains by stochastic
ELBO optimization, and prunes whole rows/columns by their radial log-modes.

Submodules
----------
specfun   Bessel-ratio bounds, log-Bessel approximations, gamma-family helpers.
dists     Distribution objects: vMF sampling/KL/gradients, log-normal, Gamma.
rdp       Grouped radial+directional weight posteriors and pruning.
nn        Minimal tensor autodiff, layers, Adam.
harness   Data loading, training protocols, checkpoints, FLOP reports.
cli       Command-line entry points.
"""

__version__ = "0.1.0"

__all__ = ["specfun", "dists", "rdp", "nn", "harness", "cli", "__version__"]
